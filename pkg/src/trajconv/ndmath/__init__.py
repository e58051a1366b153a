"""Minimal reverse-mode differentiation over dense numpy arrays."""

from .array import (
    ContractError,
    DimensionError,
    Graph,
    NdArray,
    as_array,
    backward,
    check_mode,
    default_dtype,
    grad_enabled,
    no_grad,
)
from .ops import (
    BatchNormState,
    InvalidBatchError,
    add,
    batchnorm_apply,
    concat,
    conv1d_apply,
    conv2d_apply,
    cumsum,
    fc_apply,
    getitem,
    lstm_step,
    mean,
    mean_euclidean,
    mul,
    relu_apply,
    reshape,
    sigmoid,
    stack,
    sub,
    tanh,
    transpose,
    transpose_conv1d_apply,
    upsample2x_time,
)
from .optim import AdamState, OptimizerError, adam_step, lr_schedule
from .ops import sum as sum_  # noqa: F401

__all__ = [
    "AdamState", "BatchNormState", "ContractError", "DimensionError", "Graph", "InvalidBatchError",
    "NdArray", "OptimizerError", "adam_step", "add", "as_array", "backward", "batchnorm_apply",
    "check_mode", "concat", "conv1d_apply", "conv2d_apply", "cumsum", "default_dtype", "fc_apply",
    "getitem", "grad_enabled", "lr_schedule", "lstm_step", "mean", "mean_euclidean", "mul", "no_grad",
    "relu_apply", "reshape", "sigmoid", "stack", "sub", "sum_", "tanh", "transpose",
    "transpose_conv1d_apply", "upsample2x_time",
]
