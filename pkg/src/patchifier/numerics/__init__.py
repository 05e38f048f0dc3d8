"""Minimal dense-tensor math with reverse-mode differentiation."""

from . import ops
from .gradcheck import GradCase, finite_difference_check, register, run_registry
from .ops import (
    affine,
    batchnorm2d,
    concat,
    conv2d,
    cross_entropy_loss,
    dropout,
    gelu,
    layernorm,
    matmul,
    mse_loss,
    multi_head_self_attention,
    relu,
    softmax,
    take,
    tanh,
    upsample_nearest2x,
    where,
)
from .optim import ParamGroup, adamw_step
from .tensor import Tensor, as_tensor, no_grad, parameter, zero_grad

__all__ = [
    "GradCase",
    "ParamGroup",
    "Tensor",
    "adamw_step",
    "affine",
    "as_tensor",
    "batchnorm2d",
    "concat",
    "conv2d",
    "cross_entropy_loss",
    "dropout",
    "finite_difference_check",
    "gelu",
    "layernorm",
    "matmul",
    "mse_loss",
    "multi_head_self_attention",
    "no_grad",
    "ops",
    "parameter",
    "register",
    "relu",
    "run_registry",
    "softmax",
    "take",
    "tanh",
    "upsample_nearest2x",
    "where",
    "zero_grad",
]
