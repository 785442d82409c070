"""Minimal dense tensor engine: autodiff, Adam, pooling and attention kernels."""

from placerec.numcore.functional import GemParams, conv2d, gem_pool, self_attention
from placerec.numcore.nn import Conv2d, Linear, Module, Parameter
from placerec.numcore.optim import Adam, AdamState, adam_step
from placerec.numcore.serialize import load_checkpoint, save_checkpoint
from placerec.numcore.tensor import (
    Tensor,
    add,
    as_tensor,
    clamp_min,
    concat,
    exp,
    gelu,
    get_default_dtype,
    log,
    matmul,
    mean,
    no_grad,
    norm,
    precision,
    relu,
    reshape,
    set_default_dtype,
    softmax,
    sqrt,
    stack,
    sub,
    take,
    tanh,
    transpose,
    sym_sum,
    tsum,
)

__all__ = [
    "Adam", "AdamState", "Conv2d", "GemParams", "Linear", "Module", "Parameter", "Tensor",
    "adam_step", "add", "as_tensor", "clamp_min", "concat", "conv2d", "exp", "gelu", "gem_pool",
    "get_default_dtype", "load_checkpoint", "log", "matmul", "mean", "no_grad", "norm",
    "precision", "relu", "reshape", "save_checkpoint", "self_attention", "set_default_dtype",
    "softmax", "sqrt", "stack", "sub", "sym_sum", "take", "tanh", "transpose", "tsum",
]
