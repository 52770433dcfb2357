"""Convolutional next-frame forecaster."""

from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .optim import AdamW, cosine_lr
from .train import (
    DEFAULT_ROLLOUT_STEPS,
    PairSet,
    TrainConfig,
    concat_pairs,
    fit,
    flux_gate,
    from_checkpoint,
    load_pairs,
    make_pairs,
    rollout,
    to_checkpoint,
    train,
)
from .unet import NetConfig, UNet

__all__ = [
    "AdamW",
    "DEFAULT_ROLLOUT_STEPS",
    "ModelCheckpoint",
    "NetConfig",
    "PairSet",
    "TrainConfig",
    "UNet",
    "concat_pairs",
    "cosine_lr",
    "fit",
    "flux_gate",
    "from_checkpoint",
    "load_checkpoint",
    "load_pairs",
    "make_pairs",
    "rollout",
    "save_checkpoint",
    "to_checkpoint",
    "train",
]
