"""Minimal dense-tensor engine: reverse-mode autodiff, AdamW, FD checking."""

from .gradcheck import grad_check
from .optim import AdamW, clip_grad_norm
from .tensor import (
    Tensor,
    UNARY_FNS,
    add,
    apply_unary,
    backward,
    concat,
    depthwise_conv1d,
    exp,
    flip,
    layer_norm,
    log1p,
    make_op,
    matmul,
    mul,
    neg,
    no_grad,
    reshape,
    sigmoid,
    silu,
    softmax,
    softplus,
    tanh,
    tmean,
    tsum,
)

__all__ = [
    "AdamW",
    "Tensor",
    "UNARY_FNS",
    "add",
    "apply_unary",
    "backward",
    "clip_grad_norm",
    "concat",
    "depthwise_conv1d",
    "exp",
    "flip",
    "grad_check",
    "layer_norm",
    "log1p",
    "make_op",
    "matmul",
    "mul",
    "neg",
    "no_grad",
    "reshape",
    "sigmoid",
    "silu",
    "softmax",
    "softplus",
    "tanh",
    "tmean",
    "tsum",
]
