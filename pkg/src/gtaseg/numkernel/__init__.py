"""Dense float32 tensors, reverse-mode autodiff, and SGD."""

from ._backend import BACKEND
from .autodiff import GradTape, Tensor, constant
from .ops import (
    IGNORE,
    add,
    channels_first,
    conv2d,
    relu,
    scale,
    softmax_channel,
    tensor_sum,
    weighted_pixel_ce,
)
from .optim import SgdState, poly_lr, sgd_step

__all__ = [
    "BACKEND",
    "GradTape",
    "IGNORE",
    "SgdState",
    "Tensor",
    "add",
    "channels_first",
    "constant",
    "conv2d",
    "poly_lr",
    "relu",
    "scale",
    "sgd_step",
    "softmax_channel",
    "tensor_sum",
    "weighted_pixel_ce",
]
