"""Reverse-mode differentiation engine and the two desk-scale networks."""

from .autodiff import ShapeError, Tensor
from .nets import (
    NetParams,
    init_params,
    load_params,
    mono_arch,
    mono_forward,
    save_params,
    stereo_arch,
    stereo_forward,
    to_batch,
)

__all__ = [
    "ShapeError",
    "Tensor",
    "NetParams",
    "init_params",
    "load_params",
    "mono_arch",
    "mono_forward",
    "save_params",
    "stereo_arch",
    "stereo_forward",
    "to_batch",
]
