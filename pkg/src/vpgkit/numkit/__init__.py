"""Deterministic float64 tensor engine: autodiff, AdamW, LR schedule, checkpoints."""
from .checkpoint import load_checkpoint, save_checkpoint
from .kernels import BACKEND
from .optim import AdamWHyper, LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    embedding,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    primitive_forward,
    reshape,
    scale,
    scatter_add_rows,
    slice_,
    softmax,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "BACKEND", "AdamWHyper", "LrSchedule", "OptimizerState", "ShapeError", "Tensor",
    "adamw_step", "add", "backward", "concat", "cross_entropy", "embedding", "gather_rows",
    "gelu", "layer_norm", "load_checkpoint", "lr_at", "matmul", "mean", "mul",
    "primitive_forward", "reshape", "save_checkpoint", "scale", "scatter_add_rows",
    "slice_", "softmax", "sub", "sum_", "transpose",
]
