"""Residual multi-scale dual-attention segmentation network.

A self-contained binary-segmentation library: a minimal reverse-mode
tensor engine, the network blocks, dice+focal training, five evaluation
metrics, dataset tooling, and a CLI (see rmsda.cli).
"""
from .engine import GradTape, Tensor, gradcheck
from .loss_metrics import (MetricsReport, combined_loss, dice_loss, focal_loss,
                           segmentation_metrics)
from .network import Model, NetworkConfig, load_checkpoint, save_checkpoint
from .train import Adam, TrainConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "GradTape",
    "MetricsReport",
    "Model",
    "NetworkConfig",
    "Tensor",
    "TrainConfig",
    "combined_loss",
    "dice_loss",
    "evaluate",
    "focal_loss",
    "gradcheck",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "segmentation_metrics",
    "train",
    "__version__",
]
