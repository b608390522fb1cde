from enum import Enum
from pydantic import BaseModel, root_validator, validator
from typing import Optional

PUBLISHED_DEPTH = 15


class TransferPlan(BaseModel):
    """Freeze the shallowest `freeze_count` of `depth` layers, tune the rest."""
    freeze_count: int
    depth: int = PUBLISHED_DEPTH

    @validator("depth")
    def validate_depth(cls, v):
        if v < 1:
            raise ValueError("depth must be positive")
        return v

    @root_validator(skip_on_failure=True)
    def validate_freeze_count(cls, values):
        i, d = values["freeze_count"], values["depth"]
        if not 0 <= i <= d:
            raise ValueError(f"freeze_count must lie in [0, {d}], got {i}")
        return values

    @property
    def tuned_count(self) -> int:
        return self.depth - self.freeze_count

    class Config:
        extra = "forbid"
        allow_mutation = False


class ProvenanceKind(str, Enum):
    SOURCE_TRAINED = "source_trained"
    SCRATCH_TARGET = "scratch_target"
    ADAPTED = "adapted"


class ModelProvenance(BaseModel):
    kind: ProvenanceKind
    domain: str
    source_checkpoint: Optional[str] = None
    source_digest: Optional[str] = None
    plan: Optional[TransferPlan] = None

    @root_validator(skip_on_failure=True)
    def validate_adapted(cls, values):
        if values["kind"] == ProvenanceKind.ADAPTED:
            if not (values.get("source_checkpoint") or values.get("source_digest")):
                raise ValueError("adapted models must reference their source model")
            if values.get("plan") is None:
                raise ValueError("adapted models must record their transfer plan")
        return values

    class Config:
        extra = "forbid"
