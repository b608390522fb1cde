"""Intensity normalization and balanced patch sampling.

A patch of even side P is centered on voxel (P/2, P/2) of its window: the
window spans P/2 voxels above/left of the center and P/2 - 1 below/right.
Centers whose window would leave the image are never sampled.
"""
import math
from dataclasses import replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.exceptions import DataError, NormalizationError, SamplingError
from app.models.volume import PatchSet, Volume
from app.services.tensor import flip_horizontal
from app.utils.logger import get_logger

logger = get_logger("sampling")

PATCH_SIDE = 32
POSITIVE_FRACTION = 0.25
MIN_LESION_CENTERS = 4


def _normalize_channel(channel: np.ndarray, brain: np.ndarray, name: str, patient_id: int) -> np.ndarray:
    inside = channel[brain].astype(np.float64)
    lo, hi = inside.min(initial=np.inf), inside.max(initial=-np.inf)
    if inside.size == 0 or not hi > lo:
        raise NormalizationError(
            f"{name} channel is constant inside the brain mask",
            details={"patient_id": patient_id, "brain_voxels": int(inside.size)},
        )
    out = np.zeros(channel.shape, dtype=np.float64)
    out[brain] = (inside - lo) / (hi - lo)
    return out.astype(np.float32)


def normalize_unit(volume: Volume) -> Volume:
    """Per-channel min-max rescaling over brain voxels; zero outside the brain."""
    brain = volume.brain_mask.astype(bool)
    return replace(
        volume,
        flair=_normalize_channel(volume.flair, brain, "flair", volume.patient_id),
        t1=_normalize_channel(volume.t1, brain, "t1", volume.patient_id),
    )


def valid_centers(shape, patch_side: int = PATCH_SIDE) -> np.ndarray:
    """Boolean map of voxels whose full patch window lies inside the image."""
    h, w = shape
    before, after = patch_side // 2, patch_side // 2 - 1
    valid = np.zeros((h, w), dtype=bool)
    valid[before:h - after, before:w - after] = True
    return valid


def extract_patches(image: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                    patch_side: int = PATCH_SIDE) -> np.ndarray:
    """Windows of a [C, H, W] image centered on the given voxels, as [N, C, P, P]."""
    windows = sliding_window_view(image, (patch_side, patch_side), axis=(1, 2))
    half = patch_side // 2
    patches = windows[:, rows - half, cols - half]  # [C, N, P, P]
    return np.ascontiguousarray(patches.transpose(1, 0, 2, 3))


def sample_patches(volume: Volume, rng: np.random.Generator,
                   positive_fraction: float = POSITIVE_FRACTION,
                   patch_side: int = PATCH_SIDE) -> PatchSet:
    """Balanced lesion/normal patches from one normalized volume.

    floor(positive_fraction * valid lesion centers) positives (at least one)
    and as many negatives from non-lesion brain voxels, both drawn without
    replacement.

    Args:
        volume: Normalized volume with its WMH and brain masks
        rng: Generator for the without-replacement draws
        positive_fraction: Share of valid lesion centers to sample
        patch_side: Even patch side P

    Returns:
        PatchSet with the positives first, then the negatives

    Raises:
        SamplingError: If fewer than MIN_LESION_CENTERS lesion voxels have a
            full window, or there are too few normal centers
    """
    valid = valid_centers(volume.shape, patch_side)
    lesion = volume.wmh_mask.astype(bool)
    brain = volume.brain_mask.astype(bool)
    pos_idx = np.flatnonzero(lesion & valid)
    neg_idx = np.flatnonzero(brain & ~lesion & valid)

    n_pos = max(1, math.floor(positive_fraction * len(pos_idx)))
    if len(pos_idx) < MIN_LESION_CENTERS or len(neg_idx) < n_pos:
        raise SamplingError(
            "Too few valid patch centers",
            details={
                "patient_id": volume.patient_id,
                "valid_lesion_centers": int(len(pos_idx)),
                "valid_normal_centers": int(len(neg_idx)),
                "required_per_class": int(n_pos),
                "min_lesion_centers": MIN_LESION_CENTERS,
            },
        )

    chosen_pos = rng.choice(pos_idx, size=n_pos, replace=False)
    chosen_neg = rng.choice(neg_idx, size=n_pos, replace=False)
    centers = np.concatenate([chosen_pos, chosen_neg])
    rows, cols = np.unravel_index(centers, volume.shape)

    patches = extract_patches(volume.image(), rows, cols, patch_side)
    labels = np.concatenate([np.ones(n_pos), np.zeros(n_pos)]).astype(np.float32)
    patient_ids = np.full(len(labels), volume.patient_id, dtype=np.int64)
    return PatchSet(patches=patches, labels=labels, patient_ids=patient_ids)


def augment_flip(patchset: PatchSet) -> PatchSet:
    """Append the left-right mirror of every patch with the same label."""
    return PatchSet(
        patches=np.concatenate([patchset.patches, flip_horizontal(patchset.patches)]),
        labels=np.concatenate([patchset.labels, patchset.labels]),
        patient_ids=np.concatenate([patchset.patient_ids, patchset.patient_ids]),
    )


def build_patch_set(volumes: Sequence[Volume], rng: np.random.Generator,
                    positive_fraction: float = POSITIVE_FRACTION,
                    augment: bool = True, patch_side: int = PATCH_SIDE) -> PatchSet:
    """
    Sample every volume in order, then flip-augment the union

    Volumes without enough valid centers are skipped with a warning.

    Args:
        volumes: Normalized volumes
        rng: One generator shared by all draws, in volume order
        positive_fraction: Share of valid lesion centers sampled per volume
        augment: Append left-right mirrors
        patch_side: Even patch side P

    Returns:
        Patches of every usable volume

    Raises:
        DataError: If no volume yields patches
    """
    parts = []
    for volume in volumes:
        try:
            parts.append(sample_patches(volume, rng, positive_fraction, patch_side))
        except SamplingError as e:
            logger.warning(f"Skipping patient {volume.patient_id}: {e.message}", extra={"details": e.details})
    if not parts:
        raise DataError("No volume yielded patches", details={"volumes": len(volumes)})
    patches = PatchSet.concatenate(parts)
    if augment:
        patches = augment_flip(patches)
    logger.info(
        f"Built {len(patches)} patches from {len(parts)} patients "
        f"({patches.positives} lesion / {patches.negatives} normal)"
    )
    return patches
