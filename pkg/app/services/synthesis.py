"""Synthetic two-channel brain slices with controllable acquisition shift.

Each patient is rendered from its own generator seeded by (domain seed,
patient index), so any patient can be regenerated alone. The shift between
domains is carried by blur (partial-volume surrogate), lesion and mimic
contrast, and an intensity gamma.
"""
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from app.exceptions import GenerationError, ParameterError
from app.models.volume import DomainDataset, Volume
from app.schemas.domain import DomainConfig, SplitSizes, SynthConfig
from app.services.sampling import normalize_unit
from app.utils.logger import get_logger, log_function_call

logger = get_logger("synthesis")

# Tissue intensities before blur, gamma and noise
FLAIR_WHITE, FLAIR_GRAY, FLAIR_CSF = 0.40, 0.48, 0.12
T1_WHITE, T1_GRAY, T1_CSF = 0.70, 0.50, 0.15
T1_LESION_DROP = 0.08
TEXTURE_AMPLITUDE = 0.04
CORTEX_THICKNESS = 5.0


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _smooth_texture(rng: np.random.Generator, side: int) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal((side, side)), sigma=side / 16.0)
    std = field.std()
    return field / std if std > 0 else field


def _place(rng: np.random.Generator, room: np.ndarray, clearance: float, what: str,
           patient_index: int) -> Tuple[int, int]:
    candidates = np.flatnonzero(room > clearance)
    if candidates.size:
        y, x = np.unravel_index(rng.choice(candidates), room.shape)
        return int(y), int(x)
    raise GenerationError(
        f"No room for a {what} with clearance {clearance:.1f} inside the white matter",
        details={"patient_index": patient_index, "clearance": clearance},
    )


def _segment_mask(yy, xx, y0, x0, y1, x1, half_width: float) -> np.ndarray:
    py, px = yy - y0, xx - x0
    dy, dx = y1 - y0, x1 - x0
    length_sq = max(dy * dy + dx * dx, 1e-9)
    t = np.clip((py * dy + px * dx) / length_sq, 0.0, 1.0)
    dist = np.hypot(py - t * dy, px - t * dx)
    return dist <= half_width


def generate_volume(config: DomainConfig, patient_index: int) -> Volume:
    """Render one normalized patient slice."""
    rng = np.random.default_rng([config.seed, patient_index])
    side = config.image_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)

    # Anatomy: elliptical brain, cortical rim, two ventricles
    cy = side / 2 + rng.uniform(-2, 2)
    cx = side / 2 + rng.uniform(-2, 2)
    brain = _ellipse(yy, xx, cy, cx, side * rng.uniform(0.36, 0.42), side * rng.uniform(0.30, 0.36))
    depth = distance_transform_edt(brain)
    cortex = brain & (depth <= CORTEX_THICKNESS)
    vent_ry, vent_rx = side * rng.uniform(0.09, 0.13), side * rng.uniform(0.03, 0.045)
    vent_gap = side * 0.06
    ventricles = (_ellipse(yy, xx, cy, cx - vent_gap, vent_ry, vent_rx, 0.15)
                  | _ellipse(yy, xx, cy, cx + vent_gap, vent_ry, vent_rx, -0.15))

    flair = np.where(brain, FLAIR_WHITE, 0.0)
    t1 = np.where(brain, T1_WHITE, 0.0)
    flair[cortex] = FLAIR_GRAY
    t1[cortex] = T1_GRAY
    flair[ventricles] = FLAIR_CSF
    t1[ventricles] = T1_CSF
    flair += TEXTURE_AMPLITUDE * _smooth_texture(rng, side) * brain
    t1 += TEXTURE_AMPLITUDE * _smooth_texture(rng, side) * brain

    # Lesions sit in white matter, clear of cortex and ventricles
    white = brain & ~cortex & ~ventricles
    room = distance_transform_edt(white)
    wmh = np.zeros((side, side), dtype=bool)
    lo, hi = config.lesion_count_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        r = rng.uniform(*config.lesion_radius_range)
        y, x = _place(rng, room, r + 1.0, "lesion", patient_index)
        wmh |= _ellipse(yy, xx, y, x, r, r * rng.uniform(0.6, 1.0), rng.uniform(0, np.pi))
    wmh &= brain

    # Thin hyperintense non-lesion structures; partial volume hides them in thick slices
    mimics = np.zeros((side, side), dtype=bool)
    lo, hi = config.mimic_count_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        y0, x0 = _place(rng, room, 2.0, "mimic", patient_index)
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(8, 20)
        y1 = float(np.clip(y0 + length * np.sin(angle), 0, side - 1))
        x1 = float(np.clip(x0 + length * np.cos(angle), 0, side - 1))
        mimics |= _segment_mask(yy, xx, y0, x0, y1, x1, half_width=0.8)
    mimics &= white & ~wmh

    flair += config.lesion_contrast * wmh + config.mimic_contrast * mimics
    t1 -= T1_LESION_DROP * wmh

    if config.blur_sigma > 0:
        flair = gaussian_filter(flair, config.blur_sigma)
        t1 = gaussian_filter(t1, config.blur_sigma)

    flair = np.clip(flair, 0.0, 1.0) ** config.intensity_gamma
    t1 = np.clip(t1, 0.0, 1.0) ** config.intensity_gamma
    if config.noise_sigma > 0:
        flair = flair + config.noise_sigma * rng.standard_normal(flair.shape)
        t1 = t1 + config.noise_sigma * rng.standard_normal(t1.shape)

    volume = Volume(
        flair=(flair * brain).astype(np.float32),
        t1=(t1 * brain).astype(np.float32),
        wmh_mask=wmh.astype(np.uint8),
        brain_mask=brain.astype(np.uint8),
        patient_id=patient_index,
        domain_tag=config.domain_tag,
    )
    return normalize_unit(volume)


@log_function_call(logger)
def generate_domain(config: DomainConfig, n_patients: int,
                    split: Optional[SplitSizes] = None) -> DomainDataset:
    """
    Generate `n_patients` volumes; patients are assigned to train, val, test in index order

    Args:
        config: Domain generator settings
        n_patients: Number of patients
        split: Split sizes; everything goes to train when omitted

    Returns:
        Dataset of normalized volumes

    Raises:
        ParameterError: If the split does not add up to `n_patients`
        GenerationError: If a lesion or mimic finds no room in white matter
    """
    if n_patients < 1:
        raise ParameterError("At least one patient is required", details={"n_patients": n_patients})
    if split is None:
        split = SplitSizes(train=n_patients, val=0, test=0)
    if split.total != n_patients:
        raise ParameterError("Split sizes must add up to the patient count",
                             details={"n_patients": n_patients, "split": split.dict()})

    volumes = [generate_volume(config, index) for index in range(n_patients)]
    ids = [v.patient_id for v in volumes]
    splits = {
        "train": ids[:split.train],
        "val": ids[split.train:split.train + split.val],
        "test": ids[split.train + split.val:],
    }
    logger.info(
        f"Generated {n_patients} {config.domain_tag.value} patients "
        f"({split.train}/{split.val}/{split.test})"
    )
    return DomainDataset(domain_tag=config.domain_tag, volumes=volumes, splits=splits)


def generate_pair(config: SynthConfig) -> Tuple[DomainDataset, DomainDataset]:
    source = generate_domain(config.source, config.source_split.total, config.source_split)
    target = generate_domain(config.target, config.target_split.total, config.target_split)
    return source, target


def lesion_contrast_measure(dataset: DomainDataset) -> float:
    """Mean FLAIR inside lesions minus mean FLAIR in lesion-free brain, over all patients."""
    inside, outside = [], []
    for volume in dataset.volumes:
        lesion = volume.wmh_mask.astype(bool)
        normal = volume.brain_mask.astype(bool) & ~lesion
        inside.append(volume.flair[lesion])
        outside.append(volume.flair[normal])
    inside_values = np.concatenate(inside)
    if inside_values.size == 0:
        raise GenerationError("Dataset contains no lesion voxels")
    return float(inside_values.mean() - np.concatenate(outside).mean())
