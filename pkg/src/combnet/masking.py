"""Checkerboard masks and the uniform-mapping source coordinate.

An output location (p, q) on out-channel j is computed by convolution when

    (p + q + j * interleave + layer_phase) is even

and by the uniform mapping otherwise.  With interleaving off and phase 0 this
is the plain checkerboard (1 iff p + q even).  Interleaving shifts the
checkerboard by one between adjacent output channels; the layer phase shifts
it between consecutive layers so stacked layers recover the full receptive
field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError


@dataclass(frozen=True)
class MaskConfig:
    interleave: bool = True
    layer_phase: int = 0
    stride: int = 1
    pad: int = 0
    kernel_size: int = 3

    def __post_init__(self):
        if self.layer_phase not in (0, 1):
            raise ConfigError(f"layer_phase must be 0 or 1, got {self.layer_phase}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ConfigError(f"pad must be >= 0, got {self.pad}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            # Even kernels have no center tap, so the uniform mapping would
            # have no source coordinate.
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")


def channel_phase(j, cfg):
    """Parity offset of out-channel j's checkerboard."""
    return (j * (1 if cfg.interleave else 0) + cfg.layer_phase) % 2


def mask_value(p, q, j, cfg):
    """1 where output (p, q, j) is a convolution site, 0 where uniform."""
    if p < 0 or q < 0 or j < 0:
        raise GeometryError(f"mask coordinates must be nonnegative, got {(p, q, j)}")
    return 1 if (p + q + channel_phase(j, cfg)) % 2 == 0 else 0


def channel_phases(c_out, cfg):
    """Per-channel parity offsets as a uint8 vector (kernel-friendly form)."""
    j = np.arange(c_out, dtype=np.int64)
    if cfg.interleave:
        return ((j + cfg.layer_phase) % 2).astype(np.uint8)
    return np.full(c_out, cfg.layer_phase % 2, dtype=np.uint8)


def make_mask(h, w, c_out, cfg):
    """Materialize the {0,1} mask tensor, shape (1, c_out, h, w)."""
    if h < 1 or w < 1 or c_out < 1:
        raise GeometryError(f"mask dims must be >= 1, got {(h, w, c_out)}")
    p = np.arange(h).reshape(1, h, 1)
    q = np.arange(w).reshape(1, 1, w)
    phase = channel_phases(c_out, cfg).astype(np.int64).reshape(c_out, 1, 1)
    mask = ((p + q + phase) % 2 == 0).astype(np.float64)
    return mask.reshape(1, c_out, h, w)


def conv_output_hw(h_in, w_in, cfg):
    """Spatial output dims of the convolution geometry in `cfg`."""
    k, s, pad = cfg.kernel_size, cfg.stride, cfg.pad
    h_out = (h_in + 2 * pad - k) // s + 1
    w_out = (w_in + 2 * pad - k) // s + 1
    if h_out < 1 or w_out < 1:
        raise GeometryError(
            f"empty output for input {h_in}x{w_in} with K={k} stride={s} pad={pad}"
        )
    return h_out, w_out


def uniform_source_coord(p, q, cfg, h_in, w_in):
    """Input coordinate feeding the uniform mapping at output (p, q).

    This is the receptive-field center of the (p, q) stencil, clamped into
    the input so border units never read zero padding.  For stride 1 with
    "same" padding it is exactly (p, q).
    """
    h_out, w_out = conv_output_hw(h_in, w_in, cfg)
    if not (0 <= p < h_out and 0 <= q < w_out):
        raise GeometryError(
            f"output coordinate {(p, q)} outside {h_out}x{w_out} output grid"
        )
    center = cfg.kernel_size // 2
    sp = min(max(p * cfg.stride + center - cfg.pad, 0), h_in - 1)
    sq = min(max(q * cfg.stride + center - cfg.pad, 0), w_in - 1)
    return sp, sq


def uniform_source_grids(h_out, w_out, cfg, h_in, w_in):
    """Vectorized source coordinates for a whole output grid."""
    center = cfg.kernel_size // 2
    sp = np.clip(np.arange(h_out) * cfg.stride + center - cfg.pad, 0, h_in - 1)
    sq = np.clip(np.arange(w_out) * cfg.stride + center - cfg.pad, 0, w_in - 1)
    return sp.astype(np.int64), sq.astype(np.int64)
