"""Discourse relation language models on a small numpy autodiff engine."""
from .model import DRLM, ModelDims, RelationDistribution, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit, init_params

__all__ = [
    "DRLM",
    "ModelDims",
    "RelationDistribution",
    "TrainConfig",
    "fit",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
]
