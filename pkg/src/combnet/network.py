"""Network assembly: plain comb-convolution stacks and VGG-style builders.

Layer-internal ordering is convolution -> ReLU -> BN.  With the pre-BN
strategy the activation and normalization apply to the convolution branch
only (statistics over convolution sites), and the uniform branch joins the
output untouched; post-BN normalizes the combined output.  Consecutive comb
layers alternate checkerboard phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import analysis, ops
from .errors import ConfigError, DataError, ShapeError
from .masking import MaskConfig

COMB_STACK_DEPTHS = (8, 16)
COMB_STACK_WIDTHS = (32, 48, 64, 96)

VGG_PLANS = {
    11: [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    13: [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    16: [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
         512, 512, 512, "M", 512, 512, 512, "M"],
    19: [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
         512, 512, 512, 512, "M", 512, 512, 512, 512, "M"],
}
VGG_HIDDEN_FC = 4096


@dataclass
class NetworkConfig:
    arch: str = "comb_stack"
    depth: int = 8
    width: int = 64
    mode: str = "comb"
    interleave: bool = True
    bn_strategy: str = "pre_bn"
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    norm: str = "by_C_out"

    def __post_init__(self):
        if self.arch not in ("comb_stack", "vgg"):
            raise ConfigError(f"arch must be comb_stack or vgg, got {self.arch!r}")
        if self.arch == "comb_stack" and self.depth not in COMB_STACK_DEPTHS:
            raise ConfigError(f"comb_stack depth must be one of {COMB_STACK_DEPTHS}")
        if self.arch == "comb_stack" and self.width not in COMB_STACK_WIDTHS:
            raise ConfigError(f"comb_stack width must be one of {COMB_STACK_WIDTHS}")
        if self.arch == "vgg" and self.depth not in VGG_PLANS:
            raise ConfigError(f"vgg depth must be one of {tuple(VGG_PLANS)}")
        if self.mode not in ("comb", "standard"):
            raise ConfigError(f"mode must be comb or standard, got {self.mode!r}")
        if self.bn_strategy not in ("pre_bn", "post_bn"):
            raise ConfigError(f"bn_strategy must be pre_bn or post_bn")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")


def _parity_sites(h, w):
    pp, qq = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = []
    for parity in (0, 1):
        sel = (pp + qq) % 2 == parity
        out.append((pp[sel], qq[sel]))
    return out


class ConvBlock:
    """Convolution (comb or standard) -> ReLU -> BN with pre/post strategy."""

    def __init__(self, name, layer: ops.CombConvLayer, bn: ops.BNState | None,
                 bn_strategy):
        self.name = name
        self.layer = layer
        self.bn = bn
        self.bn_strategy = bn_strategy
        self.grad_weights = None
        self.grad_gamma = None
        self.grad_beta = None
        self._cache = None

    def forward(self, x, training):
        y = ops.comb_conv_forward(x, self.layer)
        if self.bn is None:
            z = ops.relu(y)
            self._cache = ("plain", x, y)
            return z
        if self.bn_strategy == "post_bn" or self.layer.mode == "standard":
            a = ops.relu(y)
            z, bn_cache = ops.batchnorm_forward(a, self.bn, training)
            self._cache = ("post", x, y, bn_cache)
            return z
        # pre-BN: activation + normalization on the convolution branch only,
        # per-channel statistics over that channel's convolution sites
        n, c, h_out, w_out = y.shape
        phases = self.layer.channel_phases()
        sites = _parity_sites(h_out, w_out)
        z = y.copy()
        gathered = []
        for parity in (0, 1):
            ch = np.nonzero(phases == parity)[0]
            pi, qi = sites[parity]
            if ch.size == 0 or pi.size == 0:
                # no convolution sites for this class (e.g. a 1x1 grid):
                # the whole map is uniform-branch passthrough
                gathered.append(None)
                continue
            vals = y[:, ch[:, None], pi[None, :], qi[None, :]]  # (N, C_sel, S)
            vals = vals.transpose(1, 0, 2).reshape(ch.size, -1)
            act = ops.relu(vals)
            out, bn_cache = ops.bn_forward_vals(act, self.bn, ch, training)
            z[:, ch[:, None], pi[None, :], qi[None, :]] = (
                out.reshape(ch.size, n, -1).transpose(1, 0, 2))
            gathered.append((ch, pi, qi, vals, bn_cache))
        self._cache = ("pre", x, y, gathered)
        return z

    def backward(self, grad_out):
        kind = self._cache[0]
        if kind == "plain":
            _, x, y = self._cache
            gy = ops.relu_backward(grad_out, y)
            self.grad_gamma = self.grad_beta = None
        elif kind == "post":
            _, x, y, bn_cache = self._cache
            ga, self.grad_gamma, self.grad_beta = ops.batchnorm_backward(grad_out, bn_cache)
            gy = ops.relu_backward(ga, y)
        else:
            _, x, y, gathered = self._cache
            n = y.shape[0]
            gy = grad_out.copy()  # masked sites pass the gradient through as-is
            self.grad_gamma = np.zeros_like(self.bn.gamma)
            self.grad_beta = np.zeros_like(self.bn.beta)
            for item in gathered:
                if item is None:
                    continue
                ch, pi, qi, pre_act, bn_cache = item
                g = grad_out[:, ch[:, None], pi[None, :], qi[None, :]]
                g = g.transpose(1, 0, 2).reshape(ch.size, -1)
                gvals, dgamma, dbeta = ops.bn_backward_vals(g, bn_cache)
                gvals = ops.relu_backward(gvals, pre_act)
                self.grad_gamma[ch] = dgamma
                self.grad_beta[ch] = dbeta
                gy[:, ch[:, None], pi[None, :], qi[None, :]] = (
                    gvals.reshape(ch.size, n, -1).transpose(1, 0, 2))
        gx, self.grad_weights = ops.comb_conv_backward(x, self.layer, gy)
        self._cache = None
        return gx

    def params(self):
        out = [(f"{self.name}.weight", self.layer.weights)]
        if self.bn is not None:
            out += [(f"{self.name}.bn.gamma", self.bn.gamma),
                    (f"{self.name}.bn.beta", self.bn.beta)]
        return out

    def grads(self):
        out = [self.grad_weights]
        if self.bn is not None:
            out += [self.grad_gamma, self.grad_beta]
        return out

    def buffers(self):
        if self.bn is None:
            return []
        return [(f"{self.name}.bn.running_mean", self.bn.running_mean),
                (f"{self.name}.bn.running_var", self.bn.running_var)]


class MaxPoolBlock:
    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x, training):
        y, self._cache = ops.maxpool2x2(x)
        return y

    def backward(self, grad_out):
        gx = ops.maxpool2x2_backward(grad_out, self._cache)
        self._cache = None
        return gx

    def params(self):
        return []

    def grads(self):
        return []

    def buffers(self):
        return []


class GlobalAvgPoolBlock:
    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x, training):
        y, self._cache = ops.avgpool_global(x)
        return y

    def backward(self, grad_out):
        gx = ops.avgpool_global_backward(grad_out, self._cache)
        self._cache = None
        return gx

    def params(self):
        return []

    def grads(self):
        return []

    def buffers(self):
        return []


class LinearBlock:
    def __init__(self, name, w, b, relu_after=False):
        self.name = name
        self.w = w
        self.b = b
        self.relu_after = relu_after
        self.grad_w = None
        self.grad_b = None
        self._cache = None

    def forward(self, x, training):
        y = ops.linear(x, self.w, self.b)
        self._cache = (x, y)
        return ops.relu(y) if self.relu_after else y

    def backward(self, grad_out):
        x, y = self._cache
        if self.relu_after:
            grad_out = ops.relu_backward(grad_out, y)
        gx, self.grad_w, self.grad_b = ops.linear_backward(grad_out, x, self.w)
        self._cache = None
        return gx

    def params(self):
        return [(f"{self.name}.weight", self.w), (f"{self.name}.bias", self.b)]

    def grads(self):
        return [self.grad_w, self.grad_b]

    def buffers(self):
        return []


@dataclass
class Network:
    config: NetworkConfig
    blocks: list = field(default_factory=list)

    def forward(self, x, training=False):
        for block in self.blocks:
            try:
                x = block.forward(x, training)
            except ShapeError as e:
                raise ShapeError(f"layer {block.name}: {e}") from e
        return x

    def backward(self, grad):
        for block in reversed(self.blocks):
            grad = block.backward(grad)
        return grad

    def params(self):
        out = []
        for block in self.blocks:
            out.extend(block.params())
        return out

    def grads(self):
        out = []
        for block in self.blocks:
            out.extend(block.grads())
        return out

    def buffers(self):
        out = []
        for block in self.blocks:
            out.extend(block.buffers())
        return out

    def param_count(self):
        return sum(int(np.size(a)) for _, a in self.params())

    def conv_blocks(self):
        return [b for b in self.blocks if isinstance(b, ConvBlock)]

    def rf_layers(self):
        """Conv/pool structure for receptive-field analysis."""
        out = []
        for b in self.blocks:
            if isinstance(b, ConvBlock):
                out.append(b.layer)
            elif isinstance(b, MaxPoolBlock):
                out.append("maxpool2x2")
        return out

    def flop_report(self):
        rows = []
        c, h, w = self.config.input_shape
        for block in self.blocks:
            if isinstance(block, ConvBlock):
                rows.append((block.name, block.layer, (c, h, w)))
                c = block.layer.c_out
                h, w = block.layer.out_hw(h, w)
            elif isinstance(block, MaxPoolBlock):
                h, w = h // 2, w // 2
        report = analysis.FlopReport.from_layers(rows)
        features = c  # after global average pool
        for block in self.blocks:
            if isinstance(block, LinearBlock):
                report.add_fixed(block.name, block.w.shape[0] * block.w.shape[1])
        return report


def _he_conv(rng, c_out, c_in_g, k):
    std = np.sqrt(2.0 / (k * k * c_in_g))
    return rng.standard_normal((c_out, c_in_g, k, k)) * std


def _uniform_linear(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = np.zeros(fan_out)
    return w, b


def _conv_block(name, rng, cfg, c_in, c_out, conv_idx, k=3, groups=1):
    mask_cfg = MaskConfig(interleave=cfg.interleave, layer_phase=conv_idx % 2,
                          stride=1, pad=k // 2, kernel_size=k)
    layer = ops.CombConvLayer(
        weights=_he_conv(rng, c_out, c_in // groups, k),
        stride=1, pad=k // 2, groups=groups, mask_cfg=mask_cfg,
        mode=cfg.mode, norm=cfg.norm)
    bn = ops.BNState.create(c_out)
    return ConvBlock(name, layer, bn, cfg.bn_strategy)


def build_comb_stack(cfg: NetworkConfig, rng=None):
    """Plain stack of 3x3 comb convolutions with pools at depth/4 boundaries."""
    if cfg.arch != "comb_stack":
        raise ConfigError(f"config arch is {cfg.arch!r}, expected comb_stack")
    rng = rng or np.random.default_rng(0)
    c_in = cfg.input_shape[0]
    blocks = []
    pool_after = {cfg.depth // 4, cfg.depth // 2, 3 * cfg.depth // 4}
    for i in range(cfg.depth):
        blocks.append(_conv_block(f"conv{i + 1}", rng, cfg,
                                  c_in if i == 0 else cfg.width, cfg.width, i))
        if (i + 1) in pool_after:
            blocks.append(MaxPoolBlock(f"pool{len([b for b in blocks if isinstance(b, MaxPoolBlock)]) + 1}"))
    blocks.append(GlobalAvgPoolBlock("gap"))
    w, b = _uniform_linear(rng, cfg.width, cfg.num_classes)
    blocks.append(LinearBlock("fc", w, b))
    return Network(cfg, blocks)


def build_vgg(cfg: NetworkConfig, rng=None):
    """VGG-style configuration on 32x32 inputs with the canonical FC head."""
    if cfg.arch != "vgg":
        raise ConfigError(f"config arch is {cfg.arch!r}, expected vgg")
    rng = rng or np.random.default_rng(0)
    plan = VGG_PLANS[cfg.depth]
    c_in = cfg.input_shape[0]
    blocks = []
    conv_idx = 0
    pool_idx = 0
    for item in plan:
        if item == "M":
            pool_idx += 1
            blocks.append(MaxPoolBlock(f"pool{pool_idx}"))
        else:
            blocks.append(_conv_block(f"conv{conv_idx + 1}", rng, cfg,
                                      c_in, item, conv_idx))
            c_in = item
            conv_idx += 1
    blocks.append(GlobalAvgPoolBlock("gap"))
    w1, b1 = _uniform_linear(rng, c_in, VGG_HIDDEN_FC)
    blocks.append(LinearBlock("fc1", w1, b1, relu_after=True))
    w2, b2 = _uniform_linear(rng, VGG_HIDDEN_FC, VGG_HIDDEN_FC)
    blocks.append(LinearBlock("fc2", w2, b2, relu_after=True))
    w3, b3 = _uniform_linear(rng, VGG_HIDDEN_FC, cfg.num_classes)
    blocks.append(LinearBlock("fc3", w3, b3))
    return Network(cfg, blocks)


def build_network(cfg: NetworkConfig, seed=0):
    rng = np.random.default_rng(seed)
    if cfg.arch == "vgg":
        return build_vgg(cfg, rng)
    return build_comb_stack(cfg, rng)


def net_forward(net: Network, x, training=False):
    x = np.ascontiguousarray(x, dtype=np.float64)
    expected = net.config.input_shape
    if x.shape[1:] != tuple(expected):
        raise ShapeError(f"input shape {x.shape[1:]} != configured {expected}")
    return net.forward(x, training)


def net_backward(net: Network, grad):
    net.backward(grad)
    return net.grads()


# ---------------------------------------------------------------------------
# checkpoint + config serialization

CHECKPOINT_MAGIC = b"COMB1"


def save_checkpoint(net: Network, path):
    """Binary checkpoint: magic, then (name, rank, dims, float64 data) records."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in net.params() + net.buffers():
            encoded = name.encode("utf-8")
            f.write(np.uint32(len(encoded)).tobytes())
            f.write(encoded)
            f.write(np.uint32(arr.ndim).tobytes())
            f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(net: Network, path):
    """Load a checkpoint saved by save_checkpoint into an existing network."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: bad checkpoint magic {data[:5]!r}")
    tensors = {}
    pos = len(CHECKPOINT_MAGIC)
    while pos < len(data):
        nlen = int(np.frombuffer(data, "<u4", 1, pos)[0]); pos += 4
        name = data[pos:pos + nlen].decode("utf-8"); pos += nlen
        rank = int(np.frombuffer(data, "<u4", 1, pos)[0]); pos += 4
        dims = tuple(int(d) for d in np.frombuffer(data, "<u4", rank, pos)); pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, "<f8", count, pos).reshape(dims).copy(); pos += 8 * count
        tensors[name] = arr
    for name, arr in net.params() + net.buffers():
        if name not in tensors:
            raise DataError(f"{path}: checkpoint missing tensor {name!r}")
        if tensors[name].shape != arr.shape:
            raise DataError(f"{path}: tensor {name!r} shape {tensors[name].shape} "
                            f"!= expected {arr.shape}")
        arr[...] = tensors[name]
    return net
