"""Minimal reverse-mode autodiff: tensors, the ops the network needs, Adam."""

from .gradcheck import GradCheckReport, grad_check, relative_error
from .ops import (
    absolute,
    add,
    batchnorm2d,
    concat,
    conv2d,
    conv_transpose2d,
    flatten,
    leaky_relu,
    linear,
    maxpool2d,
    mean,
    mul,
    reshape,
    same_padding,
    split,
    square,
    sub,
    sum_all,
    tanh,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, check_finite, get_default_dtype, precision, set_default_dtype

__all__ = [
    "Adam", "AdamState", "GradCheckReport", "Tensor", "absolute", "adam_step", "add",
    "batchnorm2d", "check_finite", "concat", "conv2d", "conv_transpose2d", "flatten",
    "get_default_dtype", "grad_check", "leaky_relu", "linear", "maxpool2d", "mean", "mul",
    "precision", "relative_error", "reshape", "same_padding", "set_default_dtype", "split",
    "square", "sub", "sum_all", "tanh",
]
