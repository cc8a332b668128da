"""Gated target-attention CTR model on a small numpy autodiff engine."""

from .data import GeneratorConfig, Instance, generate
from .estimator import GapNetClassifier
from .metrics import auc_global, evaluate
from .model import AblationConfig, GapNetParams, ModelConfig, Overrides, forward, predict_proba, preset
from .trainer import TrainConfig, train

__all__ = [
    "AblationConfig",
    "GapNetClassifier",
    "GapNetParams",
    "GeneratorConfig",
    "Instance",
    "ModelConfig",
    "Overrides",
    "TrainConfig",
    "auc_global",
    "evaluate",
    "forward",
    "generate",
    "predict_proba",
    "preset",
    "train",
]

__version__ = "0.1.0"
