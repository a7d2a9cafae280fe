"""Robust, sparse and stable ReLU classifiers trained with a numpy autodiff core."""
from .diffcore import Graph, backward
from .gates import GateConfig
from .losses import VARIANTS, LossSpec, compose
from .network import Classifier, MLPParams, glorot_init, load_checkpoint, save_checkpoint
from .train import TrainConfig, fit, multi_seed

__all__ = [
    "Graph", "backward", "GateConfig", "VARIANTS", "LossSpec", "compose", "Classifier", "MLPParams",
    "glorot_init", "load_checkpoint", "save_checkpoint", "TrainConfig", "fit", "multi_seed",
]
__version__ = "0.1.0"
