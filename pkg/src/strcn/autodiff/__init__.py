"""Minimal reverse-mode automatic differentiation over numpy arrays.

Arrays are float64 and image tensors use NHWC layout.
"""

from .tensor import NonFiniteError, Tensor, as_tensor
from .functional import (
    batch_norm,
    conv2d,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
    softmax,
)
from .optim import SGD, sgd_step
from .gradcheck import GradCheckResult, grad_check, grad_check_detailed
from .checkpoint import load_arrays, save_arrays

__all__ = [
    "NonFiniteError",
    "Tensor",
    "as_tensor",
    "batch_norm",
    "conv2d",
    "global_avg_pool",
    "linear",
    "max_pool2d",
    "relu",
    "softmax",
    "SGD",
    "sgd_step",
    "grad_check",
    "grad_check_detailed",
    "GradCheckResult",
    "load_arrays",
    "save_arrays",
]
