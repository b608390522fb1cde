from typing import Sequence

import numpy as np
from sklearn.metrics import roc_auc_score

from app.exceptions import DataError, DimensionError, MetricError


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise DataError(f"{name} must be binary")
        mask = mask.astype(bool)
    return mask


def dice(pred_mask: np.ndarray, ref_mask: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|), with two empty masks scoring 1.0."""
    pred_mask = np.asarray(pred_mask)
    ref_mask = np.asarray(ref_mask)
    if pred_mask.shape != ref_mask.shape:
        raise DimensionError(
            f"Mask shapes differ: {pred_mask.shape} vs {ref_mask.shape}",
            details={"pred": list(pred_mask.shape), "ref": list(ref_mask.shape)},
        )
    a = _as_binary(pred_mask, "pred_mask")
    b = _as_binary(ref_mask, "ref_mask")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def pooled_dice(pred_masks: Sequence[np.ndarray], ref_masks: Sequence[np.ndarray]) -> float:
    """Dice over the voxels of all patients pooled together."""
    if len(pred_masks) != len(ref_masks):
        raise DimensionError("Mask lists differ in length",
                             details={"pred": len(pred_masks), "ref": len(ref_masks)})
    overlap = 0
    total = 0
    for pred, ref in zip(pred_masks, ref_masks):
        if np.shape(pred) != np.shape(ref):
            raise DimensionError("Mask shapes differ",
                                 details={"pred": list(np.shape(pred)), "ref": list(np.shape(ref))})
        a = _as_binary(pred, "pred_mask")
        b = _as_binary(ref, "ref_mask")
        overlap += int(np.logical_and(a, b).sum())
        total += int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * overlap / total


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """
    Area under the ROC curve; tied scores count one half

    Args:
        scores: Lesion-class scores, any shape
        labels: Binary labels with the same number of elements

    Returns:
        Probability that a random positive outscores a random negative

    Raises:
        MetricError: If only one class is present
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError("Scores and labels differ in length",
                             details={"scores": len(scores), "labels": len(labels)})
    positive = _as_binary(labels, "labels")
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present", details={"positives": n_pos, "negatives": n_neg})

    return float(roc_auc_score(positive, scores))
