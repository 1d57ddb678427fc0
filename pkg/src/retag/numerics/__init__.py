"""Numpy-backed tensor engine: tape autodiff, AdamW, gradient checking, RNG."""

from .gradcheck import GradCheckEntry, GradCheckReport, grad_check
from .optim import OptimState, adamw_step, clip_grad_norm
from .rng import RngStream
from .tensor import (
    DEFAULT_DTYPE,
    Tape,
    Tensor,
    add,
    apply_op,
    backward,
    concat,
    cross_entropy,
    dropout,
    gather,
    gelu,
    index,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    softmax,
    stop_gradient,
    sub,
    tensor,
    transpose,
    zeros,
)

__all__ = [
    "DEFAULT_DTYPE",
    "GradCheckEntry",
    "GradCheckReport",
    "OptimState",
    "RngStream",
    "Tape",
    "Tensor",
    "adamw_step",
    "add",
    "apply_op",
    "backward",
    "clip_grad_norm",
    "concat",
    "cross_entropy",
    "dropout",
    "gather",
    "gelu",
    "grad_check",
    "index",
    "layer_norm",
    "log_softmax",
    "masked_fill",
    "matmul",
    "mul",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "softmax",
    "stop_gradient",
    "sub",
    "tensor",
    "transpose",
    "zeros",
]
