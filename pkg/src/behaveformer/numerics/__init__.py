"""Float64 reverse-mode autodiff, layers and Adam."""

from .gradcheck import gradcheck, numeric_grad
from .nn import BatchNorm, Conv2d, Dropout, LayerNorm, Linear, Module, Parameter
from .optim import Adam, AdamState, adam_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    affine,
    as_tensor,
    backward,
    batch_norm,
    concat,
    conv2d_same,
    div,
    dropout,
    euclidean,
    exp,
    flatten,
    hinge,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    permute,
    relu,
    reshape,
    scale,
    softmax,
    square,
    sub,
    sum_,
    take,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
