"""Minimal dense tensors with reverse-mode differentiation."""
from .check import finite_diff_check
from .io import load_checkpoint, save_checkpoint
from .layers import (
    add_channel,
    avg_pool2,
    concat,
    conv2d,
    dense,
    group_norm,
    mix_rows,
    self_attention,
    silu,
    upsample2,
)
from .optim import Adam
from .tensor import (
    Tensor,
    add,
    backprop,
    bmm,
    mean,
    mul,
    reshape,
    scale,
    softmax,
    square,
    sub,
    topological_order,
    total,
    transpose,
)

__all__ = [
    "Adam", "Tensor", "add", "add_channel", "avg_pool2", "backprop", "bmm", "concat",
    "conv2d", "dense", "finite_diff_check", "group_norm", "load_checkpoint", "mean",
    "mix_rows", "mul", "reshape", "save_checkpoint", "scale", "self_attention", "silu",
    "softmax", "square", "sub", "topological_order", "total", "transpose", "upsample2",
]
