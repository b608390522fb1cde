from enum import IntEnum
from pydantic import BaseModel, validator
from typing import List, Optional


class Scenario(IntEnum):
    DIRECT = 1   # source model applied to the target domain unchanged
    SCRATCH = 2  # trained on target data only
    ADAPTED = 3  # source model fine-tuned on target data


KEY_COLUMNS = ["scenario", "target_train_size", "freeze_index", "seed"]

# Fixed results CSV column order; an absent optional value is an empty field.
# Wall times go to a separate timing file so the results file is reproducible.
RESULT_COLUMNS = KEY_COLUMNS + [
    "dice_test_mean",
    "dice_test_pooled",
    "val_auc",
    "epochs_run",
    "train_patients",
    "error",
]
TIMING_COLUMNS = KEY_COLUMNS + ["wall_time"]


class RunResult(BaseModel):
    scenario: Scenario
    target_train_size: Optional[int] = None
    freeze_index: Optional[int] = None
    seed: int
    dice_test_mean: Optional[float] = None
    dice_test_pooled: Optional[float] = None
    val_auc: Optional[float] = None
    epochs_run: int = 0
    wall_time: float = 0.0
    train_patients: List[int] = []
    error: Optional[str] = None

    @validator("dice_test_mean", "dice_test_pooled")
    def validate_dice(cls, v):
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("Dice must lie in [0, 1]")
        return v

    @validator("freeze_index")
    def validate_freeze_index(cls, v, values):
        if v is not None and values.get("scenario") != Scenario.ADAPTED:
            raise ValueError("only adapted runs carry a freeze index")
        return v

    @property
    def sort_key(self):
        return (
            int(self.scenario),
            -1 if self.target_train_size is None else self.target_train_size,
            -1 if self.freeze_index is None else self.freeze_index,
            self.seed,
        )

    @property
    def failed(self) -> bool:
        return self.error is not None


class ModelStatus(BaseModel):
    model_loaded: bool
    checkpoint: Optional[str] = None
    provenance: Optional[str] = None


class SegmentationResponse(BaseModel):
    height: int
    width: int
    threshold: float
    lesion_voxels: int
    brain_voxels: int
    dice: Optional[float] = None
