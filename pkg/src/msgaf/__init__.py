"""Microservice end-to-end latency estimation with multi-scale graph attention."""

from .encoding import ServiceGraph, SystemState, build_feature_matrix, fit_normalizer
from .model import Model, ModelConfig, forward, init_params
from .training import LossConfig, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "LossConfig",
    "Model",
    "ModelConfig",
    "ServiceGraph",
    "SystemState",
    "TrainConfig",
    "build_feature_matrix",
    "fit_normalizer",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
