"""Skeleton action recognition with separate joint and frame attention, on numpy."""

from .attention import AttentionConfig, AttentionModule, flop_estimate
from .datapipe import SkeletonSequence, load_skeleton_file, save_skeleton_file
from .estimator import DSTANetClassifier, StreamDecoupler
from .network import DSTANet, LayerSpec, NetworkConfig, default_config
from .trainer import TrainConfig, evaluate, fuse_scores, lr_at_epoch, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionModule",
    "DSTANet",
    "DSTANetClassifier",
    "LayerSpec",
    "NetworkConfig",
    "SkeletonSequence",
    "StreamDecoupler",
    "TrainConfig",
    "default_config",
    "evaluate",
    "flop_estimate",
    "fuse_scores",
    "load_skeleton_file",
    "lr_at_epoch",
    "save_skeleton_file",
    "train",
]
