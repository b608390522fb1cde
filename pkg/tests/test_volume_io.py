import struct

import numpy as np
import pytest

from app.exceptions import FormatError, StorageError, UnsupportedVersionError
from app.models.volume import Volume
from app.schemas.domain import DomainTag
from app.services.volume_io import (
    decode_volume, encode_volume, read_manifest, read_volume, save_dataset, write_manifest, write_segmentation,
    write_volume,
)


@pytest.fixture
def volume(source_dataset):
    return source_dataset.volumes[0]


def test_volume_round_trip(volume, tmp_path):
    path = write_volume(volume, tmp_path / "v.mvl")
    assert read_volume(path).equals(volume)


def test_target_volume_round_trip_with_reader_tag(target_dataset, tmp_path):
    volume = target_dataset.volumes[0]
    path = write_volume(volume, tmp_path / "t.mvl")
    assert read_volume(path, DomainTag.TARGET).equals(volume)


def test_encoded_size(volume):
    h, w = volume.shape
    assert len(encode_volume(volume)) == 16 + h * w * 10 + 4


def test_encoding_is_bit_exact():
    volume = Volume(
        flair=np.array([[0.5, 1.0, -2.0]], dtype=np.float32),
        t1=np.array([[0.25, 0.0, 3.0]], dtype=np.float32),
        wmh_mask=np.array([[0, 1, 0]], dtype=np.uint8),
        brain_mask=np.array([[1, 1, 0]], dtype=np.uint8),
        patient_id=258,
        domain_tag=DomainTag.TARGET,
    )
    expected = (
        b"MVL1" + struct.pack("<III", 1, 1, 3)
        + struct.pack("<3f", 0.5, 1.0, -2.0) + struct.pack("<3f", 0.25, 0.0, 3.0)
        + bytes([0, 1, 0]) + bytes([1, 1, 0])
        + struct.pack("<I", 258)
    )
    assert encode_volume(volume) == expected
    assert decode_volume(expected, DomainTag.TARGET).equals(volume)


def test_truncated_volume_reports_offset(volume):
    data = encode_volume(volume)
    with pytest.raises(FormatError) as exc_info:
        decode_volume(data[:-3])
    assert exc_info.value.details["offset"] == len(data) - 4


def test_truncated_header():
    with pytest.raises(FormatError):
        decode_volume(b"MVL1")


def test_bad_magic(volume):
    data = b"XXXX" + encode_volume(volume)[4:]
    with pytest.raises(FormatError) as exc_info:
        decode_volume(data)
    assert exc_info.value.details["offset"] == 0


def test_unsupported_version(volume):
    data = bytearray(encode_volume(volume))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError):
        decode_volume(bytes(data))


def test_trailing_bytes(volume):
    with pytest.raises(FormatError):
        decode_volume(encode_volume(volume) + b"\x00")


def test_domain_tag_is_supplied_by_the_reader(volume):
    data = encode_volume(volume)
    assert decode_volume(data).domain_tag == DomainTag.SOURCE
    assert decode_volume(data, DomainTag.TARGET).domain_tag == DomainTag.TARGET


def test_non_binary_mask_rejected(volume):
    h, w = volume.shape
    data = bytearray(encode_volume(volume))
    data[16 + 8 * h * w] = 3  # first WMH byte
    with pytest.raises(FormatError):
        decode_volume(bytes(data))


def test_missing_file(tmp_path):
    with pytest.raises(StorageError):
        read_volume(tmp_path / "absent.mvl")


def test_manifest_round_trip(source_dataset, target_dataset, tmp_path):
    entries = save_dataset(source_dataset, tmp_path) + save_dataset(target_dataset, tmp_path)
    manifest = write_manifest(entries, tmp_path / "manifest.txt")

    datasets = read_manifest(manifest)

    assert set(datasets) == {DomainTag.SOURCE, DomainTag.TARGET}
    target = datasets[DomainTag.TARGET]
    assert target.splits == target_dataset.splits
    for loaded, original in zip(target.volumes, target_dataset.volumes):
        assert loaded.equals(original)


def test_manifest_column_sets_domain(source_dataset, tmp_path):
    entries = save_dataset(source_dataset, tmp_path)
    _, split, rel = entries[0]
    manifest = write_manifest([(DomainTag.TARGET, split, rel)], tmp_path / "manifest.txt")
    datasets = read_manifest(manifest)
    assert list(datasets) == [DomainTag.TARGET]
    assert datasets[DomainTag.TARGET].volumes[0].domain_tag == DomainTag.TARGET


def test_manifest_malformed_line(tmp_path):
    path = tmp_path / "manifest.txt"
    path.write_text("source train\n")
    with pytest.raises(FormatError):
        read_manifest(path)


def test_segmentation_file_layout(volume, tmp_path):
    probability = np.where(volume.brain_mask == 1, 0.75, 0.0).astype(np.float32)
    mask = volume.brain_mask.copy()
    loaded = read_volume(write_segmentation(volume, probability, mask, tmp_path / "seg.mvl"))
    assert np.array_equal(loaded.flair, probability)
    assert np.array_equal(loaded.wmh_mask, mask)
    assert not loaded.t1.any()
