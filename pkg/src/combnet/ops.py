"""Forward/backward operators: comb and standard convolution, batch norm,
activation, pooling, linear head, and the softmax cross-entropy loss.

Convolutions are dispatched to the selected kernel backend; everything else
is plain numpy.  No convolution carries a bias term; the linear head keeps
its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import ConfigError, GeometryError, LabelError, ShapeError
from .masking import MaskConfig, channel_phases, make_mask


@dataclass
class CombConvLayer:
    """One convolution layer: weights, geometry, mask config, mode.

    mode="comb" interleaves checkerboard convolution sites with uniform
    mappings; mode="standard" is a plain convolution and ignores mask_cfg.
    groups = in-channels = out-channels gives the single-channel comb variant.
    """

    weights: np.ndarray  # (C_out, C_in // groups, K, K)
    stride: int = 1
    pad: int = 0
    groups: int = 1
    mask_cfg: MaskConfig | None = None
    mode: str = "comb"
    norm: str = "by_C_out"

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got {w.ndim}")
        if w.shape[2] != w.shape[3]:
            raise ShapeError(f"only square kernels supported, got {w.shape[2:]}")
        self.weights = w
        if self.mode not in ("comb", "standard"):
            raise ConfigError(f"mode must be comb or standard, got {self.mode!r}")
        if self.norm not in ("by_C_out", "by_C_in"):
            raise ConfigError(f"norm must be by_C_out or by_C_in, got {self.norm!r}")
        if self.mode == "comb":
            if self.mask_cfg is None:
                self.mask_cfg = MaskConfig(stride=self.stride, pad=self.pad,
                                           kernel_size=self.kernel_size)
            elif (self.mask_cfg.stride, self.mask_cfg.pad, self.mask_cfg.kernel_size) != \
                    (self.stride, self.pad, self.kernel_size):
                raise ConfigError(
                    f"mask geometry {self.mask_cfg} disagrees with layer "
                    f"stride={self.stride} pad={self.pad} K={self.kernel_size}")

    @property
    def c_out(self):
        return self.weights.shape[0]

    @property
    def c_in(self):
        return self.weights.shape[1] * self.groups

    @property
    def kernel_size(self):
        return self.weights.shape[2]

    def uniform_divisor(self):
        d = self.c_out if self.norm == "by_C_out" else self.c_in
        return d // self.groups

    def out_hw(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.pad
        h_out = (h + 2 * p - k) // s + 1
        w_out = (w + 2 * p - k) // s + 1
        if h_out < 1 or w_out < 1:
            raise GeometryError(
                f"empty output for {h}x{w} input with K={k} stride={s} pad={p}")
        return h_out, w_out

    def channel_phases(self):
        return channel_phases(self.c_out, self.mask_cfg)

    def mask(self, h_in, w_in):
        """Materialized {0,1} mask over this layer's output grid."""
        h_out, w_out = self.out_hw(h_in, w_in)
        return make_mask(h_out, w_out, self.c_out, self.mask_cfg)


def _check_conv_shapes(x, w, stride, pad, groups):
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4, got {x.ndim}")
    c_out, c_in_g, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"only square kernels supported, got {(k, k2)}")
    if groups < 1 or c_out % groups:
        raise ShapeError(f"groups={groups} does not divide out-channels {c_out}")
    if x.shape[1] != c_in_g * groups:
        raise ShapeError(
            f"input channels {x.shape[1]} != kernel in-channels {c_in_g} * groups {groups}")
    h_out = (x.shape[2] + 2 * pad - k) // stride + 1
    w_out = (x.shape[3] + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise GeometryError(
            f"empty output for {x.shape[2]}x{x.shape[3]} input with K={k} "
            f"stride={stride} pad={pad}")
    return h_out, w_out


def conv2d_standard(x, w, stride=1, pad=0, groups=1):
    """Dense convolution, no bias: y[n,j] = sum_c x[n,c] * k[j,c]."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    _check_conv_shapes(x, w, stride, pad, groups)
    return backend.conv2d_forward(x, w, stride, pad, groups)


def uniform_map(x, c_out, norm="by_C_out"):
    """Per-location channel average scaled by 1/C_out (or 1/C_in), (N,1,H,W)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("uniform_map needs a nonempty input")
    d = c_out if norm == "by_C_out" else x.shape[1]
    if d == 0:
        raise ConfigError("uniform-mapping divisor is zero")
    inv_d = 1.0 / d
    n, c_in, h, w = x.shape
    out = np.zeros((n, 1, h, w), dtype=np.float64)
    for c in range(c_in):  # sequential accumulation, same order as the kernels
        out[:, 0] += inv_d * x[:, c]
    return out


def comb_conv_forward(x, layer: CombConvLayer):
    """Comb convolution: convolution responses at mask=1 sites, channel
    averages of the receptive-field center at mask=0 sites."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    _check_conv_shapes(x, layer.weights, layer.stride, layer.pad, layer.groups)
    if layer.mode == "standard":
        return backend.conv2d_forward(x, layer.weights, layer.stride, layer.pad,
                                      layer.groups)
    inv_d = 1.0 / layer.uniform_divisor()
    return backend.comb_forward(x, layer.weights, layer.stride, layer.pad,
                                layer.groups, layer.channel_phases(), inv_d)


def comb_dense_reference(x, layer: CombConvLayer):
    """Dense evaluation of the mask-combined formula.

    Computes the full convolution everywhere, then combines it with the
    uniform values through the materialized mask:

        y = mask * conv(x) + (1 - mask) * uniform_at_source(x)

    Kept alongside the skipping fast path as its equivalence oracle; both
    share per-site arithmetic order, so they agree bit for bit.
    """
    from .masking import uniform_source_grids

    x = np.ascontiguousarray(x, dtype=np.float64)
    _check_conv_shapes(x, layer.weights, layer.stride, layer.pad, layer.groups)
    y = backend.conv2d_forward(x, layer.weights, layer.stride, layer.pad, layer.groups)
    if layer.mode == "standard":
        return y
    n, c_out, h_out, w_out = y.shape
    mask = layer.mask(x.shape[2], x.shape[3]) >= 0.5  # (1, C_out, H_out, W_out)
    sp, sq = uniform_source_grids(h_out, w_out, layer.mask_cfg, x.shape[2], x.shape[3])
    c_in_g = layer.c_in // layer.groups
    c_out_g = layer.c_out // layer.groups
    out = np.empty_like(y)
    for g in range(layer.groups):
        xg = x[:, g * c_in_g:(g + 1) * c_in_g]
        um = uniform_map(xg, layer.uniform_divisor(), "by_C_out")[:, 0]
        um_src = um[:, sp][:, :, sq]  # gathered at the source coordinates
        for j in range(g * c_out_g, (g + 1) * c_out_g):
            out[:, j] = np.where(mask[0, j], y[:, j], um_src)
    return out


def comb_conv_backward(x, layer: CombConvLayer, grad_out):
    """Gradients of comb convolution w.r.t. input and weights.

    Weight gradients accumulate only from convolution sites; each masked
    site routes 1/D of its gradient to the source coordinate of every input
    channel in its group (the point-wise feature-reuse path).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    h_out, w_out = _check_conv_shapes(x, layer.weights, layer.stride, layer.pad,
                                      layer.groups)
    expected = (x.shape[0], layer.c_out, h_out, w_out)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    if layer.mode == "standard":
        return backend.conv2d_backward(x, layer.weights, grad_out, layer.stride,
                                       layer.pad, layer.groups)
    inv_d = 1.0 / layer.uniform_divisor()
    return backend.comb_backward(x, layer.weights, grad_out, layer.stride, layer.pad,
                                 layer.groups, layer.channel_phases(), inv_d)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels, eps=1e-5, momentum=0.1):
        return cls(gamma=np.ones(channels), beta=np.zeros(channels),
                   running_mean=np.zeros(channels), running_var=np.ones(channels),
                   eps=eps, momentum=momentum)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"momentum must be in (0,1), got {self.momentum}")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


def bn_forward_vals(vals, state: BNState, ch_idx, training):
    """Normalize per-channel value rows; vals has shape (C_sel, M).

    ch_idx selects which rows of the state's per-channel vectors apply
    (pre-BN normalizes each channel over its convolution sites only, so the
    caller may pass channel subsets).  Returns (out, cache).
    """
    c_sel, m = vals.shape
    if m == 0:
        raise ShapeError("batch statistics need at least one value per channel")
    gamma = state.gamma[ch_idx].reshape(-1, 1)
    beta = state.beta[ch_idx].reshape(-1, 1)
    if training:
        mean = vals.mean(axis=1, keepdims=True)
        var = vals.var(axis=1, keepdims=True)
        state.running_mean[ch_idx] = ((1 - state.momentum) * state.running_mean[ch_idx]
                                      + state.momentum * mean[:, 0])
        state.running_var[ch_idx] = ((1 - state.momentum) * state.running_var[ch_idx]
                                     + state.momentum * var[:, 0])
    else:
        mean = state.running_mean[ch_idx].reshape(-1, 1)
        var = state.running_var[ch_idx].reshape(-1, 1)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (vals - mean) * inv_std
    out = gamma * x_hat + beta
    cache = (x_hat, inv_std, gamma, bool(training))
    return out, cache


def bn_backward_vals(grad, cache):
    """Backward of bn_forward_vals; returns (grad_vals, dgamma, dbeta)."""
    x_hat, inv_std, gamma, training = cache
    m = grad.shape[1]
    dgamma = (grad * x_hat).sum(axis=1)
    dbeta = grad.sum(axis=1)
    if training:
        gvals = (gamma * inv_std / m) * (
            m * grad - dbeta.reshape(-1, 1) - x_hat * dgamma.reshape(-1, 1))
    else:
        gvals = gamma * inv_std * grad
    return gvals, dgamma, dbeta


def batchnorm_forward(x, state: BNState, training):
    """Channel-wise batch norm over (N, H, W); returns (y, cache)."""
    n, c, h, w = x.shape
    if c != state.gamma.shape[0]:
        raise ShapeError(f"channel count {c} != BN state {state.gamma.shape[0]}")
    if training and n == 0:
        raise ShapeError("cannot compute batch statistics over an empty batch")
    vals = x.transpose(1, 0, 2, 3).reshape(c, -1)
    out, cache = bn_forward_vals(vals, state, np.arange(c), training)
    y = out.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), (cache, (n, c, h, w))


def batchnorm_backward(grad_out, cache):
    inner, (n, c, h, w) = cache
    grad = grad_out.transpose(1, 0, 2, 3).reshape(c, -1)
    gvals, dgamma, dbeta = bn_backward_vals(grad, inner)
    gx = gvals.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gx), dgamma, dbeta


# ---------------------------------------------------------------------------
# activation, pooling, head, loss


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0.0)


def maxpool2x2(x):
    """2x2 max pooling, stride 2 (odd trailing row/col dropped)."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    v = x[:, :, :h2 * 2, :w2 * 2].reshape(n, c, h2, 2, w2, 2)
    v = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = v.argmax(axis=4)
    y = np.take_along_axis(v, idx[..., None], axis=4)[..., 0]
    return y, (idx, x.shape)


def maxpool2x2_backward(grad_out, cache):
    idx, shape = cache
    n, c, h, w = shape
    h2, w2 = h // 2, w // 2
    g = np.zeros((n, c, h2, w2, 4), dtype=np.float64)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=4)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    gx = np.zeros(shape, dtype=np.float64)
    gx[:, :, :h2 * 2, :w2 * 2] = g.reshape(n, c, h2 * 2, w2 * 2)
    return gx


def avgpool_global(x):
    """Global average pool to (N, C)."""
    return x.mean(axis=(2, 3)), x.shape


def avgpool_global_backward(grad_out, shape):
    n, c, h, w = shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), shape).copy()


def linear(x, w, b):
    """Affine head: x (N, F) @ w (F, O) + b (O,)."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear input width {x.shape[1]} != weight rows {w.shape[0]}")
    return x @ w + b


def linear_backward(grad_out, x, w):
    gx = grad_out @ w.T
    gw = x.T @ grad_out
    gb = grad_out.sum(axis=0)
    return gx, gw, gb


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, grad_logits)."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise LabelError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = -np.log(probs[np.arange(n), labels]).mean()
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
