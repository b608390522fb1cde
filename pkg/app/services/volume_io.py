"""MVL1 volume files and the plain-text dataset manifest.

Volume layout, all integers little-endian:

    "MVL1" | u32 version | u32 H | u32 W
    FLAIR  H*W float32
    T1     H*W float32
    WMH    H*W uint8
    brain  H*W uint8
    u32 patient id

The file carries no domain: the manifest lists one volume per line as
`<domain> <split> <relative path>` and that column sets each volume's tag.
Blank lines and `#` comments are ignored.
"""
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from app.exceptions import DataError, FormatError, UnsupportedVersionError, handle_io_error
from app.models.volume import SPLIT_NAMES, DomainDataset, Volume
from app.schemas.domain import DomainTag
from app.utils.logger import get_logger, log_io_operation

logger = get_logger("volume_io")

MAGIC = b"MVL1"
VERSION = 1
HEADER = struct.Struct("<4sIII")
TRAILER = struct.Struct("<I")

PathLike = Union[str, Path]
ManifestEntry = Tuple[DomainTag, str, str]


def encode_volume(volume: Volume) -> bytes:
    h, w = volume.shape
    parts = [
        HEADER.pack(MAGIC, VERSION, h, w),
        np.ascontiguousarray(volume.flair, dtype="<f4").tobytes(),
        np.ascontiguousarray(volume.t1, dtype="<f4").tobytes(),
        np.ascontiguousarray(volume.wmh_mask, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(volume.brain_mask, dtype=np.uint8).tobytes(),
        TRAILER.pack(volume.patient_id),
    ]
    return b"".join(parts)


def _take(data: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(data):
        raise FormatError(
            f"Volume file truncated while reading {what}",
            details={"offset": offset, "needed": size, "available": len(data) - offset},
        )
    return data[offset:offset + size]


def decode_volume(data: bytes, domain_tag: DomainTag = DomainTag.SOURCE) -> Volume:
    """
    Parse an MVL1 byte string; nothing is returned unless the whole file is valid

    Args:
        data: Complete file contents
        domain_tag: Domain assigned to the volume, usually from its manifest line

    Returns:
        The decoded volume

    Raises:
        FormatError: On a bad magic, truncation, trailing bytes or non-binary masks
        UnsupportedVersionError: If the version field is not 1
    """
    magic, version, h, w = HEADER.unpack(_take(data, 0, HEADER.size, "header"))
    if magic != MAGIC:
        raise FormatError("Bad volume magic", details={"offset": 0, "found": magic.hex()})
    if version != VERSION:
        raise UnsupportedVersionError(
            f"Volume format version {version} is not supported",
            details={"offset": 4, "version": version, "supported": [VERSION]},
        )
    if h == 0 or w == 0:
        raise FormatError("Volume has an empty image plane", details={"offset": 8, "height": h, "width": w})

    n = h * w
    offset = HEADER.size
    planes = {}
    for name, dtype, itemsize in (("flair", "<f4", 4), ("t1", "<f4", 4),
                                  ("wmh_mask", np.uint8, 1), ("brain_mask", np.uint8, 1)):
        raw = _take(data, offset, n * itemsize, name)
        planes[name] = np.frombuffer(raw, dtype=dtype).reshape(h, w).copy()
        offset += n * itemsize

    (patient_id,) = TRAILER.unpack(_take(data, offset, TRAILER.size, "patient id"))
    offset += TRAILER.size
    if offset != len(data):
        raise FormatError("Trailing bytes after volume", details={"offset": offset, "extra": len(data) - offset})

    for name in ("wmh_mask", "brain_mask"):
        if planes[name].max(initial=0) > 1:
            raise FormatError(f"{name} plane is not binary", details={"plane": name})

    return Volume(
        flair=planes["flair"].astype(np.float32),
        t1=planes["t1"].astype(np.float32),
        wmh_mask=planes["wmh_mask"],
        brain_mask=planes["brain_mask"],
        patient_id=int(patient_id),
        domain_tag=DomainTag(domain_tag),
    )


@log_io_operation("write volume")
def write_volume(volume: Volume, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_volume(volume))
    except OSError as e:
        raise handle_io_error(e, f"writing volume {path}")
    return path


@log_io_operation("read volume")
def read_volume(path: PathLike, domain_tag: DomainTag = DomainTag.SOURCE) -> Volume:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise handle_io_error(e, f"reading volume {path}")
    try:
        return decode_volume(data, domain_tag)
    except FormatError as e:
        e.details.setdefault("path", str(path))
        raise


def write_segmentation(volume: Volume, probability: np.ndarray, mask: np.ndarray, path: PathLike) -> Path:
    """Store a probability map (float plane) and predicted mask (byte plane) as an MVL1 file.

    The FLAIR plane carries the probability map, the WMH plane the predicted
    mask; the T1 plane is left at zero.
    """
    result = Volume(
        flair=probability.astype(np.float32),
        t1=np.zeros(volume.shape, dtype=np.float32),
        wmh_mask=mask.astype(np.uint8),
        brain_mask=volume.brain_mask.astype(np.uint8),
        patient_id=volume.patient_id,
        domain_tag=volume.domain_tag,
    )
    return write_volume(result, path)


def volume_filename(volume: Volume) -> str:
    return f"{DomainTag(volume.domain_tag).value}_{volume.patient_id:04d}.mvl"


@log_io_operation("save dataset")
def save_dataset(dataset: DomainDataset, out_dir: PathLike) -> List[ManifestEntry]:
    """Write every split volume under `out_dir/<domain>/` and return manifest entries."""
    out_dir = Path(out_dir)
    index = dataset.by_id()
    entries: List[ManifestEntry] = []
    for split in SPLIT_NAMES:
        for pid in dataset.splits.get(split, []):
            volume = index[pid]
            relative = Path(dataset.domain_tag.value) / volume_filename(volume)
            write_volume(volume, out_dir / relative)
            entries.append((dataset.domain_tag, split, relative.as_posix()))
    return entries


@log_io_operation("write manifest")
def write_manifest(entries: List[ManifestEntry], path: PathLike) -> Path:
    path = Path(path)
    lines = ["# domain split path"]
    lines += [f"{DomainTag(tag).value} {split} {rel}" for tag, split, rel in entries]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise handle_io_error(e, f"writing manifest {path}")
    return path


def parse_manifest(path: PathLike) -> List[ManifestEntry]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise handle_io_error(e, f"reading manifest {path}")

    entries: List[ManifestEntry] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise FormatError("Manifest lines need `domain split path`",
                              details={"path": str(path), "line": lineno, "content": raw})
        domain, split, rel = fields
        try:
            tag = DomainTag(domain)
        except ValueError:
            raise FormatError("Unknown domain in manifest",
                              details={"path": str(path), "line": lineno, "domain": domain})
        if split not in SPLIT_NAMES:
            raise FormatError("Unknown split in manifest",
                              details={"path": str(path), "line": lineno, "split": split})
        entries.append((tag, split, rel))
    return entries


@log_io_operation("read manifest")
def read_manifest(path: PathLike) -> Dict[DomainTag, DomainDataset]:
    """
    Load every volume a manifest lists, grouped into one dataset per domain

    Args:
        path: Manifest file; volume paths are relative to its directory

    Returns:
        Datasets keyed by domain, splits in manifest order

    Raises:
        FormatError: On a malformed manifest line or volume file
        DataError: If the manifest lists no volumes
    """
    path = Path(path)
    base = path.parent
    volumes: Dict[DomainTag, List[Volume]] = {}
    splits: Dict[DomainTag, Dict[str, List[int]]] = {}
    for tag, split, rel in parse_manifest(path):
        volume = read_volume(base / rel, tag)
        volumes.setdefault(tag, []).append(volume)
        splits.setdefault(tag, {name: [] for name in SPLIT_NAMES})[split].append(volume.patient_id)

    if not volumes:
        raise DataError("Manifest lists no volumes", details={"path": str(path)})
    datasets = {tag: DomainDataset(domain_tag=tag, volumes=volumes[tag], splits=splits[tag]) for tag in volumes}
    logger.info(f"Loaded manifest {path}: " + ", ".join(
        f"{tag.value}={len(ds.volumes)}" for tag, ds in datasets.items()))
    return datasets
