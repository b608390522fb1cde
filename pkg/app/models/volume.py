from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from app.exceptions import DataError, DimensionError
from app.schemas.domain import DomainTag

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Volume:
    """One synthetic patient slice: FLAIR-like and T1-like channels plus masks."""
    flair: np.ndarray
    t1: np.ndarray
    wmh_mask: np.ndarray
    brain_mask: np.ndarray
    patient_id: int
    domain_tag: DomainTag

    def __post_init__(self):
        shape = self.flair.shape
        if len(shape) != 2:
            raise DimensionError("Volume channels must be 2-D", details={"shape": list(shape)})
        for name in ("t1", "wmh_mask", "brain_mask"):
            if getattr(self, name).shape != shape:
                raise DimensionError(
                    f"Volume {name} shape does not match FLAIR",
                    details={"flair": list(shape), name: list(getattr(self, name).shape)},
                )
        for name in ("wmh_mask", "brain_mask"):
            values = np.unique(getattr(self, name))
            if not np.all(np.isin(values, (0, 1))):
                raise DataError(f"{name} must be binary", details={"values": values.tolist()[:10]})
        if np.any(self.wmh_mask.astype(bool) & ~self.brain_mask.astype(bool)):
            raise DataError("Lesion voxels found outside the brain mask",
                            details={"patient_id": self.patient_id})

    @property
    def shape(self):
        return self.flair.shape

    def image(self) -> np.ndarray:
        """Channels stacked (flair, t1) as a [2, H, W] float32 array."""
        return np.stack([self.flair, self.t1]).astype(np.float32, copy=False)

    def equals(self, other: "Volume") -> bool:
        return (
            self.patient_id == other.patient_id
            and self.domain_tag == other.domain_tag
            and np.array_equal(self.flair, other.flair)
            and np.array_equal(self.t1, other.t1)
            and np.array_equal(self.wmh_mask, other.wmh_mask)
            and np.array_equal(self.brain_mask, other.brain_mask)
        )


@dataclass
class DomainDataset:
    domain_tag: DomainTag
    volumes: List[Volume]
    splits: Dict[str, List[int]] = field(default_factory=dict)

    def __post_init__(self):
        seen = {}
        for name, ids in self.splits.items():
            for pid in ids:
                if pid in seen:
                    raise DataError(
                        "Patient appears in more than one split",
                        details={"patient_id": pid, "splits": [seen[pid], name]},
                    )
                seen[pid] = name

    def by_id(self) -> Dict[int, Volume]:
        return {v.patient_id: v for v in self.volumes}

    def split(self, name: str) -> List[Volume]:
        index = self.by_id()
        return [index[pid] for pid in self.splits.get(name, [])]

    def subset(self, patient_ids: Sequence[int]) -> List[Volume]:
        index = self.by_id()
        return [index[pid] for pid in patient_ids]


@dataclass
class PatchSet:
    """Two-channel patches labeled by their center voxel.

    `patient_ids` records the patient each patch came from.
    """
    patches: np.ndarray  # [N, 2, P, P]
    labels: np.ndarray   # [N], 0 or 1
    patient_ids: np.ndarray = None

    def __post_init__(self):
        if self.patches.ndim != 4:
            raise DimensionError("Patches must be [N, C, P, P]", details={"shape": list(self.patches.shape)})
        if self.labels.shape != (self.patches.shape[0],):
            raise DimensionError(
                "Label count does not match patch count",
                details={"patches": list(self.patches.shape), "labels": list(self.labels.shape)},
            )
        if self.patient_ids is None:
            self.patient_ids = np.full(len(self.labels), -1, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def positives(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def negatives(self) -> int:
        return int(np.sum(self.labels == 0))

    def consumed_patients(self) -> List[int]:
        return sorted(int(p) for p in np.unique(self.patient_ids) if p >= 0)

    @classmethod
    def concatenate(cls, parts: Sequence["PatchSet"]) -> "PatchSet":
        if not parts:
            raise DataError("No patch sets to concatenate")
        return cls(
            patches=np.concatenate([p.patches for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            patient_ids=np.concatenate([p.patient_ids for p in parts]),
        )
