import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.schemas.network import NetworkSpec
from app.schemas.training import TrainingHistory
from app.schemas.transfer import ModelProvenance

# Gradient and optimizer-moment dictionaries are keyed "<layer>.<tensor>".
Gradients = Dict[str, np.ndarray]

TRAINABLE_FIELDS = ("weight", "bias", "gamma", "beta")
BUFFER_FIELDS = ("running_mean", "running_var")


@dataclass
class LayerParams:
    name: str
    kind: str  # "conv" or "dense"
    weight: np.ndarray
    bias: np.ndarray
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    frozen: bool = False

    @property
    def has_bn(self) -> bool:
        return self.gamma is not None

    def tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        """All stored arrays, trainable ones first, BN buffers last."""
        for attr in TRAINABLE_FIELDS + BUFFER_FIELDS:
            value = getattr(self, attr)
            if value is not None:
                yield attr, value

    def trainable(self) -> Iterator[Tuple[str, np.ndarray]]:
        for attr in TRAINABLE_FIELDS:
            value = getattr(self, attr)
            if value is not None:
                yield attr, value

    def copy(self) -> "LayerParams":
        arrays = {attr: (None if getattr(self, attr) is None else getattr(self, attr).copy())
                  for attr in TRAINABLE_FIELDS + BUFFER_FIELDS}
        return LayerParams(name=self.name, kind=self.kind, frozen=self.frozen, **arrays)


@dataclass
class ParamSet:
    """Named parameter and BN-statistics tensors of one network, with freeze flags."""
    spec: NetworkSpec
    layers: List[LayerParams]
    step: int = 0

    def copy(self) -> "ParamSet":
        return ParamSet(spec=self.spec.copy(), layers=[layer.copy() for layer in self.layers], step=self.step)

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def frozen_count(self) -> int:
        return sum(1 for layer in self.layers if layer.frozen)

    def layer(self, name: str) -> LayerParams:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        for layer in self.layers:
            for attr, value in layer.tensors():
                yield f"{layer.name}.{attr}", value

    def trainable_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        for layer in self.layers:
            if layer.frozen:
                continue
            for attr, value in layer.trainable():
                yield f"{layer.name}.{attr}", value

    def tensor(self, key: str) -> np.ndarray:
        layer_name, attr = key.split(".", 1)
        return getattr(self.layer(layer_name), attr)

    def is_frozen(self, key: str) -> bool:
        return self.layer(key.split(".", 1)[0]).frozen

    def num_parameters(self) -> int:
        """Trainable scalar count; BN running statistics are buffers and excluded."""
        return sum(
            int(value.size)
            for layer in self.layers
            for _, value in layer.trainable()
        )

    def digest(self) -> str:
        """SHA-256 over every tensor's name, shape and bytes."""
        h = hashlib.sha256()
        for key, value in self.named_tensors():
            h.update(key.encode())
            h.update(str(value.shape).encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()


@dataclass
class TrainedModel:
    params: ParamSet
    provenance: ModelProvenance
    history: TrainingHistory = field(default_factory=TrainingHistory)
    seed: int = 0
