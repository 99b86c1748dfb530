"""Minimal reverse-mode autodiff: the layers, losses and optimizer the two networks use."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .losses import bootstrapped_ce, dice_loss
from .ops import (
    BatchNormState,
    as_tensor,
    batchnorm,
    concat_channels,
    conv3d,
    deconv3d,
    maxpool3d,
    relu,
    sigmoid,
    softmax_channels,
)
from .optim import Adam, adam_step
from .tensor import Parameter, Tensor, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "BatchNormState",
    "CheckpointError",
    "Parameter",
    "Tensor",
    "adam_step",
    "as_tensor",
    "batchnorm",
    "bootstrapped_ce",
    "concat_channels",
    "conv3d",
    "deconv3d",
    "dice_loss",
    "is_grad_enabled",
    "load_checkpoint",
    "maxpool3d",
    "no_grad",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "softmax_channels",
]
