import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.exceptions import DataError, NormalizationError, SamplingError
from app.models.volume import Volume
from app.schemas.domain import DomainTag
from app.services.sampling import (
    augment_flip, build_patch_set, extract_patches, normalize_unit, sample_patches, valid_centers,
)


def _lesion_volume(patient_id=0, lesion=True, lesion_block=(slice(20, 25), slice(18, 26))):
    """48x48 volume with a 5x8 lesion block inside the valid 32x32 center region."""
    rng = np.random.default_rng(patient_id)
    wmh = np.zeros((48, 48), dtype=np.uint8)
    if lesion:
        wmh[lesion_block] = 1
    flair = np.where(wmh == 1, 1.0, rng.uniform(0.0, 0.5, (48, 48))).astype(np.float32)
    t1 = rng.uniform(0.0, 1.0, (48, 48)).astype(np.float32)
    return Volume(flair=flair, t1=t1, wmh_mask=wmh, brain_mask=np.ones((48, 48), dtype=np.uint8),
                  patient_id=patient_id, domain_tag=DomainTag.SOURCE)


def test_normalize_unit_rescales_brain_voxels():
    brain = np.zeros((3, 3), dtype=np.uint8)
    brain[1] = 1
    flair = np.zeros((3, 3), dtype=np.float32)
    flair[1] = [2.0, 6.0, 4.0]
    t1 = np.zeros((3, 3), dtype=np.float32)
    t1[1] = [1.0, 2.0, 3.0]
    t1[0, 0] = 9.0  # outside the brain, ignored and zeroed
    volume = Volume(flair=flair, t1=t1, wmh_mask=np.zeros((3, 3), dtype=np.uint8), brain_mask=brain,
                    patient_id=1, domain_tag=DomainTag.SOURCE)

    normalized = normalize_unit(volume)

    assert_allclose(normalized.flair[1], [0.0, 1.0, 0.5])
    assert_allclose(normalized.t1[1], [0.0, 0.5, 1.0])
    assert normalized.t1[0, 0] == 0.0


def test_normalize_constant_channel_raises():
    brain = np.ones((3, 3), dtype=np.uint8)
    volume = Volume(flair=np.full((3, 3), 5.0, dtype=np.float32), t1=np.eye(3, dtype=np.float32),
                    wmh_mask=np.zeros((3, 3), dtype=np.uint8), brain_mask=brain,
                    patient_id=2, domain_tag=DomainTag.TARGET)
    with pytest.raises(NormalizationError):
        normalize_unit(volume)


def test_valid_centers_window():
    valid = valid_centers((48, 48), 32)
    rows = np.flatnonzero(valid.any(axis=1))
    assert rows[0] == 16 and rows[-1] == 32
    assert valid.sum() == 17 * 17


def test_extract_patches_centers_on_voxel():
    image = np.arange(2 * 40 * 40, dtype=np.float32).reshape(2, 40, 40)
    patches = extract_patches(image, np.array([16, 20]), np.array([16, 23]), 32)
    assert patches.shape == (2, 2, 32, 32)
    assert patches[1, 0, 16, 16] == image[0, 20, 23]
    assert_array_equal(patches[0, 1], image[1, 0:32, 0:32])


def test_sample_patches_counts_and_labels():
    volume = _lesion_volume()
    patches = sample_patches(volume, np.random.default_rng(0), positive_fraction=0.25, patch_side=32)

    # 40 valid lesion centers -> floor(0.25 * 40) = 10 of each class
    assert patches.positives == 10
    assert patches.negatives == 10
    centers = patches.patches[:, 0, 16, 16]
    assert np.all(centers[patches.labels == 1] == 1.0)
    assert np.all(centers[patches.labels == 0] < 1.0)
    assert patches.consumed_patients() == [0]


def test_sample_patches_without_lesions_raises():
    with pytest.raises(SamplingError) as exc_info:
        sample_patches(_lesion_volume(lesion=False), np.random.default_rng(0), patch_side=32)
    assert exc_info.value.details["valid_lesion_centers"] == 0


def test_sample_patches_rejects_lesions_below_four_voxels():
    volume = _lesion_volume(lesion_block=(slice(24, 25), slice(24, 26)))
    with pytest.raises(SamplingError) as exc_info:
        sample_patches(volume, np.random.default_rng(0), patch_side=32)
    assert exc_info.value.details["valid_lesion_centers"] == 2
    assert exc_info.value.details["min_lesion_centers"] == 4


def test_sample_patches_accepts_four_voxel_lesion():
    volume = _lesion_volume(lesion_block=(slice(24, 26), slice(24, 26)))
    patches = sample_patches(volume, np.random.default_rng(0), positive_fraction=0.25, patch_side=32)
    assert patches.positives == 1
    assert patches.negatives == 1


def test_build_patch_set_augments_and_skips():
    volumes = [_lesion_volume(0), _lesion_volume(1, lesion=False), _lesion_volume(2)]
    patches = build_patch_set(volumes, np.random.default_rng(0), 0.25, augment=True, patch_side=32)

    assert len(patches) == 80
    assert patches.positives == 40
    assert patches.consumed_patients() == [0, 2]
    assert_array_equal(patches.patches[40], patches.patches[0][..., ::-1])


def test_build_patch_set_without_augmentation():
    patches = build_patch_set([_lesion_volume(0)], np.random.default_rng(0), 0.25, augment=False, patch_side=32)
    assert len(patches) == 20


def test_build_patch_set_with_no_usable_volume():
    with pytest.raises(DataError):
        build_patch_set([_lesion_volume(lesion=False)], np.random.default_rng(0), patch_side=32)


def test_augment_flip_keeps_labels():
    patches = sample_patches(_lesion_volume(), np.random.default_rng(1), patch_side=32)
    augmented = augment_flip(patches)
    assert_array_equal(augmented.labels, np.concatenate([patches.labels, patches.labels]))


def test_sampling_is_reproducible():
    first = sample_patches(_lesion_volume(), np.random.default_rng(9), patch_side=32)
    second = sample_patches(_lesion_volume(), np.random.default_rng(9), patch_side=32)
    assert_array_equal(first.patches, second.patches)
