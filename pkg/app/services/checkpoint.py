"""DSK1 model checkpoints.

Layout, all integers little-endian:

    "DSK1" | u32 version | u32 n | n bytes of UTF-8 JSON header
    u32 tensor count
    per tensor: u32 name length | name | u32 rank | rank x u32 dims | float32 data

The JSON header holds the network description, provenance, training
history, seed, step counter and per-layer freeze flags.
"""
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import ValidationError

from app.exceptions import FormatError, UnsupportedVersionError, handle_io_error
from app.models.params import ParamSet, TrainedModel
from app.schemas.network import NetworkSpec
from app.schemas.training import TrainingHistory
from app.schemas.transfer import ModelProvenance
from app.services.network import build_network
from app.utils.logger import get_logger, log_io_operation

logger = get_logger("checkpoint")

MAGIC = b"DSK1"
VERSION = 1
U32 = struct.Struct("<I")

PathLike = Union[str, Path]


def encode_checkpoint(model: TrainedModel) -> bytes:
    params = model.params
    header = {
        "spec": params.spec.dict(),
        "provenance": json.loads(model.provenance.json()),
        "history": json.loads(model.history.json()),
        "seed": model.seed,
        "step": params.step,
        "frozen": {layer.name: layer.frozen for layer in params.layers},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = list(params.named_tensors())

    parts = [MAGIC, U32.pack(VERSION), U32.pack(len(header_bytes)), header_bytes, U32.pack(len(tensors))]
    for name, value in tensors:
        encoded = name.encode("utf-8")
        parts.append(U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(U32.pack(value.ndim))
        parts.extend(U32.pack(dim) for dim in value.shape)
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(
                f"Checkpoint truncated while reading {what}",
                details={"offset": self.offset, "needed": size, "available": len(self.data) - self.offset},
            )
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(U32.size, what))[0]


def decode_checkpoint(data: bytes) -> TrainedModel:
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError("Bad checkpoint magic", details={"offset": 0, "found": magic.hex()})
    version = reader.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(
            f"Checkpoint format version {version} is not supported",
            details={"offset": 4, "version": version, "supported": [VERSION]},
        )

    header_offset = reader.offset
    raw_header = reader.take(reader.u32("header length"), "header")
    try:
        header = json.loads(raw_header.decode("utf-8"))
        spec = NetworkSpec(**header["spec"])
        provenance = ModelProvenance(**header["provenance"])
        history = TrainingHistory(**header["history"])
        frozen = dict(header["frozen"])
        seed, step = int(header["seed"]), int(header["step"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ValidationError) as e:
        raise FormatError("Checkpoint header is invalid", details={"offset": header_offset, "error": str(e)})

    params = build_network(spec, np.random.default_rng(0))
    expected = dict(params.named_tensors())
    loaded = {}
    for _ in range(reader.u32("tensor count")):
        record_offset = reader.offset
        name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8", errors="replace")
        rank = reader.u32("tensor rank")
        shape = tuple(reader.u32("tensor dims") for _ in range(rank))
        if name not in expected or expected[name].shape != shape:
            raise FormatError(
                f"Tensor {name} does not belong to the recorded network",
                details={"offset": record_offset, "tensor": name, "shape": list(shape),
                         "expected": list(expected[name].shape) if name in expected else None},
            )
        count = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(count * 4, f"tensor {name}")
        loaded[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)

    if reader.offset != len(data):
        raise FormatError("Trailing bytes after checkpoint",
                          details={"offset": reader.offset, "extra": len(data) - reader.offset})
    missing = sorted(set(expected) - set(loaded))
    if missing:
        raise FormatError("Checkpoint is missing tensors", details={"missing": missing})

    for layer in params.layers:
        for attr, _ in list(layer.tensors()):
            setattr(layer, attr, loaded[f"{layer.name}.{attr}"])
        layer.frozen = bool(frozen.get(layer.name, False))
    params.step = step
    return TrainedModel(params=params, provenance=provenance, history=history, seed=seed)


@log_io_operation("save checkpoint")
def save_checkpoint(model: TrainedModel, path: PathLike) -> Path:
    """
    Write a DSK1 checkpoint, creating parent directories

    Args:
        model: Parameters with provenance, history and seed
        path: Destination file

    Returns:
        The written path

    Raises:
        StorageError: If the file cannot be written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(model))
    except OSError as e:
        raise handle_io_error(e, f"writing checkpoint {path}")
    logger.info(f"Saved {model.provenance.kind.value} checkpoint to {path}")
    return path


@log_io_operation("load checkpoint")
def load_checkpoint(path: PathLike) -> TrainedModel:
    """
    Read a DSK1 checkpoint

    Args:
        path: Checkpoint file

    Returns:
        Model with its provenance, history, seed and freeze flags

    Raises:
        StorageError: If the file cannot be read
        FormatError: If the contents are malformed; details include the path
        UnsupportedVersionError: If the version is not 1
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise handle_io_error(e, f"reading checkpoint {path}")
    try:
        return decode_checkpoint(data)
    except FormatError as e:
        e.details.setdefault("path", str(path))
        raise
