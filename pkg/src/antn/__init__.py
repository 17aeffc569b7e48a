"""Adaptive noise-tolerant segmentation from two noisy label sources.

A clean-label network and one per-pixel transition network per noisy source
are trained jointly by EM. Baselines (direct u-net training and a global
transition matrix), synthetic data generation, classical segmenters and
evaluation metrics live alongside.
"""

from .errors import ConfigError, DataError
from .segnets import CleanNet, MiniUNetSpec, TransitionNet
from .trainer import Dataset, ModelCheckpoint, TrainConfig, train_antn, train_ntn, train_unet_direct

__all__ = [
    "CleanNet",
    "ConfigError",
    "DataError",
    "Dataset",
    "MiniUNetSpec",
    "ModelCheckpoint",
    "TrainConfig",
    "TransitionNet",
    "train_antn",
    "train_ntn",
    "train_unet_direct",
]
