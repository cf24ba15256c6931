"""Minimal reverse-mode autodiff over numpy arrays."""

from . import ops
from .gradcheck import CoordError, GradCheckReport, check_gradients
from .ops import (
    add,
    concat,
    cross_entropy,
    div,
    gather,
    gelu,
    head_project,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    multi_head_attention,
    reshape,
    softmax,
    sqrt,
    sub,
    take_rows,
    tensor_sum,
    transpose,
)
from .tensor import Parameter, Tensor, constant, no_grad

__all__ = [
    "CoordError",
    "GradCheckReport",
    "Parameter",
    "Tensor",
    "add",
    "check_gradients",
    "concat",
    "constant",
    "cross_entropy",
    "div",
    "gather",
    "gelu",
    "head_project",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "multi_head_attention",
    "no_grad",
    "ops",
    "reshape",
    "softmax",
    "sqrt",
    "sub",
    "take_rows",
    "tensor_sum",
    "transpose",
]
