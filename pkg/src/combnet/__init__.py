"""combnet: comb (checkerboard-masked) convolution kernels and tooling."""

from .backend import backend_name
from .masking import MaskConfig, make_mask, mask_value, uniform_source_coord
from .ops import (
    BNState,
    CombConvLayer,
    comb_conv_backward,
    comb_conv_forward,
    conv2d_standard,
    uniform_map,
)

__version__ = "0.1.0"

__all__ = [
    "BNState",
    "CombConvLayer",
    "MaskConfig",
    "backend_name",
    "comb_conv_backward",
    "comb_conv_forward",
    "conv2d_standard",
    "make_mask",
    "mask_value",
    "uniform_map",
    "uniform_source_coord",
    "__version__",
]
