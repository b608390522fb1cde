from .volume import DomainDataset, PatchSet, Volume
from .params import LayerParams, ParamSet, TrainedModel

__all__ = ["DomainDataset", "PatchSet", "Volume", "LayerParams", "ParamSet", "TrainedModel"]
