"""Minimal reverse-mode tensor engine for batched 5-axis volumes.

Exactly the differentiable operations the segmentation network needs,
built on numpy arrays: convolution, normalization, pooling, upsampling,
concatenation, pointwise nonlinearities, a finite-difference gradient
checker, and a flat binary parameter checkpoint.
"""

from .checkpoint import CheckpointError, load_params, save_params
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    ConvSpec,
    add,
    concat_channels,
    conv3d,
    default_groups,
    group_norm,
    instance_norm,
    maxpool3d,
    relu,
    sigmoid,
    sum_all,
    trilinear_upsample2x,
)
from .tensor import Tape, Tensor, accumulate

__all__ = [
    "CheckpointError",
    "ConvSpec",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "accumulate",
    "add",
    "concat_channels",
    "conv3d",
    "default_groups",
    "grad_check",
    "group_norm",
    "instance_norm",
    "load_params",
    "maxpool3d",
    "relu",
    "save_params",
    "sigmoid",
    "sum_all",
    "trilinear_upsample2x",
]
