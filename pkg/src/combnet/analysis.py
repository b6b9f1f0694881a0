"""Cost accounting, sparse lowering, receptive fields, and gradient checks.

MAC counts are exact: the nominal "half the sites" is resolved from the
actual per-channel ones count of the mask, and the channel-average work is
counted once per location per input channel (one multiply-add each), matching
how the kernels compute it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, NumericalError, ShapeError
from .masking import channel_phase
from .ops import CombConvLayer


def _parity_site_count(h, w, parity):
    """Number of grid points with (p + q) % 2 == parity."""
    even = ((h + 1) // 2) * ((w + 1) // 2) + (h // 2) * (w // 2)
    return even if parity == 0 else h * w - even


def reduction_ratio(k, c_out):
    """Nominal fraction of convolution work removed: 1/2 - 1/(K^2 * C_out)."""
    return 0.5 - 1.0 / (k * k * c_out)


def count_macs(layer: CombConvLayer, in_shape):
    """Exact (macs_standard, macs_comb, connections_removed) for one layer.

    in_shape is (C_in, H, W).  Counts fall back to direct enumeration of the
    mask, so degenerate geometries (e.g. K=1) report their true cost even
    where the closed-form ratio formula leaves its domain.
    """
    c_in, h, w = in_shape
    if c_in != layer.c_in:
        raise ShapeError(f"input channels {c_in} != layer in-channels {layer.c_in}")
    h_out, w_out = layer.out_hw(h, w)
    k = layer.kernel_size
    c_in_g = c_in // layer.groups
    hw = h_out * w_out
    macs_standard = hw * k * k * c_in_g * layer.c_out
    if layer.mode == "standard":
        return macs_standard, macs_standard, 0
    ones_total = sum(
        _parity_site_count(h_out, w_out, channel_phase(j, layer.mask_cfg))
        for j in range(layer.c_out)
    )
    macs_comb = k * k * c_in_g * ones_total + hw * c_in
    removed = (k * k - 1) * c_in_g * (hw * layer.c_out - ones_total)
    return macs_standard, macs_comb, removed


@dataclass
class LayerCost:
    name: str
    macs_standard: int
    macs_comb: int
    connections_removed: int
    reduction_ratio: float


@dataclass
class FlopReport:
    per_layer: list

    @property
    def total_standard(self):
        return sum(r.macs_standard for r in self.per_layer)

    @property
    def total_comb(self):
        return sum(r.macs_comb for r in self.per_layer)

    @property
    def total_removed(self):
        return sum(r.connections_removed for r in self.per_layer)

    @classmethod
    def from_layers(cls, named_layers):
        """named_layers: iterable of (name, layer, in_shape)."""
        rows = []
        for name, layer, in_shape in named_layers:
            std, comb, removed = count_macs(layer, in_shape)
            ratio = 1.0 - comb / std if std else 0.0
            rows.append(LayerCost(name, std, comb, removed, ratio))
        return cls(rows)

    def add_fixed(self, name, macs):
        """Append a mode-independent row (e.g. a fully connected layer)."""
        self.per_layer.append(LayerCost(name, macs, macs, 0, 0.0))

    def to_csv(self, scale=1):
        lines = ["layer,macs_standard,macs_comb,removed,ratio"]
        for r in self.per_layer:
            lines.append(f"{r.name},{r.macs_standard * scale},{r.macs_comb * scale},"
                         f"{r.connections_removed * scale},{r.reduction_ratio:.6f}")
        total_ratio = (1.0 - self.total_comb / self.total_standard
                       if self.total_standard else 0.0)
        lines.append(f"total,{self.total_standard * scale},{self.total_comb * scale},"
                     f"{self.total_removed * scale},{total_ratio:.6f}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sparse lowering


@dataclass
class SparseMatrix:
    """Coordinate-form operator from flattened input to flattened output."""

    rows: int
    cols: int
    entries: list  # (row, col, value), stored in accumulation order

    def to_dense(self):
        m = np.zeros((self.rows, self.cols))
        for r, c, v in self.entries:
            m[r, c] = v
        return m

    def apply(self, vec):
        """Sparse matrix-vector product, accumulating in entry order."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.cols,):
            raise ShapeError(f"vector length {vec.shape} != columns {self.cols}")
        r = np.array([e[0] for e in self.entries], dtype=np.int64)
        c = np.array([e[1] for e in self.entries], dtype=np.int64)
        v = np.array([e[2] for e in self.entries], dtype=np.float64)
        out = np.zeros(self.rows, dtype=np.float64)
        np.add.at(out, r, v * vec[c])
        return out

    def to_text(self):
        lines = [f"{self.rows} {self.cols} {len(self.entries)}"]
        for r, c, v in self.entries:
            lines.append(f"{r} {c} {v!r}")
        return "\n".join(lines) + "\n"


def lower_to_sparse(layer: CombConvLayer, in_shape):
    """Lower one (single-group) layer to its matrix-vector form.

    Convolution rows carry the kernel elements at their stencil columns in
    (channel, kernel-row, kernel-col) order; masked rows carry a lone 1/D at
    the source coordinate of each input channel.
    """
    if layer.groups != 1:
        raise ShapeError("sparse lowering supports single-group layers only")
    c_in, h, w = in_shape
    if c_in != layer.c_in:
        raise ShapeError(f"input channels {c_in} != layer in-channels {layer.c_in}")
    h_out, w_out = layer.out_hw(h, w)
    k, s, pad = layer.kernel_size, layer.stride, layer.pad
    inv_d = 1.0 / layer.uniform_divisor() if layer.mode == "comb" else 0.0
    center = k // 2
    entries = []
    for j in range(layer.c_out):
        phase = channel_phase(j, layer.mask_cfg) if layer.mode == "comb" else 0
        for p in range(h_out):
            for q in range(w_out):
                row = (j * h_out + p) * w_out + q
                conv_site = layer.mode == "standard" or (p + q + phase) % 2 == 0
                if conv_site:
                    for c in range(c_in):
                        for u in range(k):
                            ih = p * s + u - pad
                            if not 0 <= ih < h:
                                continue
                            for v in range(k):
                                iw = q * s + v - pad
                                if 0 <= iw < w:
                                    entries.append((row, (c * h + ih) * w + iw,
                                                    float(layer.weights[j, c, u, v])))
                else:
                    sp = min(max(p * s + center - pad, 0), h - 1)
                    sq = min(max(q * s + center - pad, 0), w - 1)
                    for c in range(c_in):
                        entries.append((row, (c * h + sp) * w + sq, inv_d))
    return SparseMatrix(layer.c_out * h_out * w_out, c_in * h * w, entries)


# ---------------------------------------------------------------------------
# receptive fields


@dataclass(frozen=True)
class ReceptiveField:
    out_pos: tuple
    input_coords: frozenset

    def bounding_box(self):
        rows = [p for p, _ in self.input_coords]
        cols = [q for _, q in self.input_coords]
        return (min(rows), min(cols), max(rows), max(cols))


def _layer_shapes(layers, in_hw):
    shapes = [tuple(in_hw)]
    for layer in layers:
        if layer == "maxpool2x2":
            h, w = shapes[-1]
            shapes.append((h // 2, w // 2))
        else:
            shapes.append(layer.out_hw(*shapes[-1]))
    return shapes


def _stencil(p, q, k, s, pad, h_in, w_in):
    deps = set()
    for u in range(k):
        ih = p * s + u - pad
        if not 0 <= ih < h_in:
            continue
        for v in range(k):
            iw = q * s + v - pad
            if 0 <= iw < w_in:
                deps.add((ih, iw))
    return deps


def _source(p, q, k, s, pad, h_in, w_in):
    return (min(max(p * s + k // 2 - pad, 0), h_in - 1),
            min(max(q * s + k // 2 - pad, 0), w_in - 1))


def receptive_field(layers, in_hw, out_pos, channel=0):
    """Exact input-dependency set of one output unit.

    layers is a list of CombConvLayer (the string "maxpool2x2" marks a pool);
    out_pos is (layer_index, p, q) at that layer's output.  A convolution
    site depends on its full stencil; a masked site depends on its single
    source coordinate through every input channel.  Below the top unit the
    set unions over all channels, so an interleaved layer contributes both
    branches at every position.
    """
    li, p0, q0 = out_pos
    if not 0 <= li < len(layers):
        raise GeometryError(f"layer index {li} outside network of {len(layers)}")
    shapes = _layer_shapes(layers[:li + 1], in_hw)
    h_top, w_top = shapes[-1]
    if not (0 <= p0 < h_top and 0 <= q0 < w_top):
        raise GeometryError(f"position {(p0, q0)} outside {h_top}x{w_top} output")
    top = layers[li]
    if top != "maxpool2x2" and not 0 <= channel < top.c_out:
        raise GeometryError(f"channel {channel} outside {top.c_out} output channels")

    current = {(p0, q0)}
    for i in range(li, -1, -1):
        layer = layers[i]
        h_in, w_in = shapes[i]
        nxt = set()
        if layer == "maxpool2x2":
            for p, q in current:
                for dp in (0, 1):
                    for dq in (0, 1):
                        if 2 * p + dp < h_in and 2 * q + dq < w_in:
                            nxt.add((2 * p + dp, 2 * q + dq))
            current = nxt
            continue
        k, s, pad = layer.kernel_size, layer.stride, layer.pad
        for p, q in current:
            if layer.mode == "standard":
                branches = {1}
            elif i == li:
                # top unit: the requested channel's own mask bit
                phase = channel_phase(channel, layer.mask_cfg)
                branches = {1 if (p + q + phase) % 2 == 0 else 0}
            else:
                phases = {channel_phase(j, layer.mask_cfg) for j in range(layer.c_out)}
                branches = {1 if (p + q + ph) % 2 == 0 else 0 for ph in phases}
            if 1 in branches:
                nxt |= _stencil(p, q, k, s, pad, h_in, w_in)
            if 0 in branches:
                nxt.add(_source(p, q, k, s, pad, h_in, w_in))
        current = nxt
    if not current:
        raise GeometryError(f"unit {out_pos} has an empty dependency set")
    return ReceptiveField(out_pos, frozenset(current))


# ---------------------------------------------------------------------------
# finite-difference gradient oracle


def grad_check(forward, inputs, analytic_grads, cotangent, step=1e-4):
    """Max relative error between analytic gradients and central differences.

    forward(*inputs) must be a pure function returning an array; the scalar
    objective is sum(cotangent * forward(...)).  analytic_grads holds one
    array per input, shaped like it.  The relative error denominator is
    max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    worst = 0.0
    for arr, grad in zip(inputs, analytic_grads):
        if arr.shape != np.shape(grad):
            raise ShapeError(f"gradient shape {np.shape(grad)} != input {arr.shape}")
        flat = arr.reshape(-1)
        gflat = np.reshape(grad, -1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float((cotangent * forward(*inputs)).sum())
            flat[i] = orig - step
            dn = float((cotangent * forward(*inputs)).sum())
            flat[i] = orig
            numeric = (up - dn) / (2.0 * step)
            analytic = float(gflat[i])
            if not (np.isfinite(numeric) and np.isfinite(analytic)):
                raise NumericalError(
                    f"non-finite derivative at coordinate {i}: "
                    f"analytic={analytic!r} numeric={numeric!r}")
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
