"""Small tensor library with tape-based reverse-mode differentiation."""

from . import checkpoint, ops
from .ops import (
    add,
    causal_attention,
    causal_softmax,
    embedding,
    gather_rows,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    mean,
    mse,
    mul,
    pick,
    relu,
    reshape,
    scale,
    softmax,
    square,
    sub,
    total,
    transpose,
)
from .optim import OptimizerState, adam_step
from .tensor import (
    ContractError,
    DimensionError,
    Gradients,
    Tape,
    Tensor,
    backward,
    default_dtype,
    no_tape,
)

__all__ = [
    "ContractError", "DimensionError", "Gradients", "OptimizerState", "Tape", "Tensor",
    "adam_step", "add", "backward", "causal_attention", "causal_softmax", "checkpoint", "default_dtype", "embedding",
    "gather_rows", "gelu", "layer_norm", "masked_fill", "matmul", "mean", "mse", "mul",
    "no_tape", "ops", "pick", "relu", "reshape", "scale", "softmax", "square", "sub",
    "total", "transpose",
]
