"""FusionActNet: static/dynamic residual experts fused by a learned guidance gate."""

from .data import Dataset, Superclass, Window, load_motionsense, load_ucihar
from .model import FusionModel, forward, fuse, predict
from .train import TrainConfig, evaluate, train_pipeline, train_stage1, train_stage2

__all__ = [
    "Dataset",
    "FusionModel",
    "Superclass",
    "TrainConfig",
    "Window",
    "evaluate",
    "forward",
    "fuse",
    "load_motionsense",
    "load_ucihar",
    "predict",
    "train_pipeline",
    "train_stage1",
    "train_stage2",
]

__version__ = "0.1.0"
