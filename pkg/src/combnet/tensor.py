"""Rank-4 tensor helpers.

Every value flowing through the network is a C-contiguous float64 ndarray in
(batch, channel, height, width) order.  numpy provides the storage; the
helpers here pin down the contract: fixed layout, double precision, explicit
bounds checks, and no broadcasting (shape mismatches are errors, never
silently expanded).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

AXIS_NAMES = ("batch", "channel", "height", "width")


def tensor_new(shape, fill=0.0):
    """Allocate an (N, C, H, W) tensor filled with a constant."""
    if len(shape) != 4:
        raise ShapeError(f"expected 4 dimensions, got {len(shape)}: {shape}")
    for axis, n in zip(AXIS_NAMES, shape):
        if int(n) != n or n < 0:
            raise ShapeError(f"{axis} dimension must be a nonnegative count, got {n!r}")
    return np.full(tuple(int(n) for n in shape), float(fill), dtype=np.float64)


def as_tensor4(data):
    """Coerce nested data / ndarray to the canonical float64 NCHW layout."""
    t = np.ascontiguousarray(data, dtype=np.float64)
    if t.ndim != 4:
        raise ShapeError(f"expected 4 dimensions, got {t.ndim}")
    return t


def _check_index(t, n, c, h, w):
    for axis, idx, size in zip(AXIS_NAMES, (n, c, h, w), t.shape):
        if not 0 <= idx < size:
            raise IndexError(f"{axis} index {idx} out of range [0, {size})")


def at(t, n, c, h, w):
    """Bounds-checked element read."""
    _check_index(t, n, c, h, w)
    return float(t[n, c, h, w])


def set_at(t, n, c, h, w, value):
    """Bounds-checked element write."""
    _check_index(t, n, c, h, w)
    t[n, c, h, w] = value


def pad2d(t, pad):
    """Zero-pad the two spatial axes by `pad` on every side."""
    if pad < 0:
        raise ShapeError(f"pad must be nonnegative, got {pad}")
    if pad == 0:
        return t.copy()
    n, c, h, w = t.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    out[:, :, pad:pad + h, pad:pad + w] = t
    return out


def ew_binary(a, b, op):
    """Elementwise add/sub/mul of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")
