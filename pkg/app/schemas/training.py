from pydantic import BaseModel, validator
from typing import List, Optional


class TrainConfig(BaseModel):
    lr0: float = 1e-4
    lr_decay: float = 0.97  # per epoch, exponential
    batch_size: int = 128
    dropout: float = 0.3
    l2_lambda: float = 1e-4
    max_epochs: int = 100
    patience: int = 10  # epochs without val AUC improvement
    seed: int = 0
    positive_fraction: float = 0.25
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5
    eval_batch_size: int = 512

    @validator("lr0")
    def validate_lr0(cls, v):
        if v <= 0:
            raise ValueError("lr0 must be positive")
        return v

    @validator("lr_decay")
    def validate_lr_decay(cls, v):
        if not 0 < v <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        return v

    @validator("batch_size")
    def validate_batch_size(cls, v):
        if v < 2:
            raise ValueError("batch_size must be at least 2 for batch normalization")
        return v

    @validator("dropout")
    def validate_dropout(cls, v):
        if not 0 <= v < 1:
            raise ValueError("dropout must lie in [0, 1)")
        return v

    @validator("l2_lambda")
    def validate_l2(cls, v):
        if v < 0:
            raise ValueError("l2_lambda must be non-negative")
        return v

    @validator("max_epochs")
    def validate_max_epochs(cls, v):
        if v < 0:
            raise ValueError("max_epochs must be non-negative")
        return v

    @validator("patience")
    def validate_patience(cls, v):
        if v < 1:
            raise ValueError("patience must be at least 1")
        return v

    @validator("positive_fraction")
    def validate_positive_fraction(cls, v):
        if not 0 < v <= 1:
            raise ValueError("positive_fraction must lie in (0, 1]")
        return v

    @validator("bn_momentum")
    def validate_bn_momentum(cls, v):
        if not 0 <= v < 1:
            raise ValueError("bn_momentum must lie in [0, 1)")
        return v

    @validator("bn_epsilon")
    def validate_bn_epsilon(cls, v):
        if v <= 0:
            raise ValueError("bn_epsilon must be positive")
        return v

    @validator("eval_batch_size")
    def validate_eval_batch_size(cls, v):
        if v < 1:
            raise ValueError("eval_batch_size must be at least 1")
        return v

    class Config:
        extra = "forbid"


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    val_auc: float
    lr: float


class TrainingHistory(BaseModel):
    records: List[EpochRecord] = []
    best_epoch: Optional[int] = None
    best_val_auc: Optional[float] = None

    @property
    def epochs_run(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)
