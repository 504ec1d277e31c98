"""Reverse-mode autodiff core used to train the probe adapters."""

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    conv2d,
    div,
    get_default_dtype,
    precision,
    reciprocal,
    set_debug_checks,
    set_default_dtype,
    softmax,
    softplus,
    upsample2x_bilinear,
    upsample2x_nearest,
)
from .nn import Conv2d, FeedForward, Linear, Module
from .optim import Adam
from .gradcheck import grad_check

__all__ = [
    "Adam",
    "Conv2d",
    "FeedForward",
    "Linear",
    "Module",
    "Parameter",
    "ShapeError",
    "Tensor",
    "conv2d",
    "div",
    "get_default_dtype",
    "grad_check",
    "precision",
    "reciprocal",
    "set_debug_checks",
    "set_default_dtype",
    "softmax",
    "softplus",
    "upsample2x_bilinear",
    "upsample2x_nearest",
]
