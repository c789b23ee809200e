"""Minimal reverse-mode autodiff used to train the separator and classifier."""

from .checkpoint import CheckpointError, load, save
from .optim import ParameterStore, adam_step, glorot_uniform
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    conv2d,
    dense,
    div,
    exp,
    frame,
    getitem,
    layer_norm,
    layer_scale,
    log,
    log10,
    matmul,
    max_,
    max_pool2d,
    mean,
    mul,
    neg,
    no_grad,
    overlap_add,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    sub,
    sum_,
    tanh,
    transpose,
)
