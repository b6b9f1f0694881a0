"""Plain-text run configuration: `key = value` lines, # comments.

One file carries both network and training keys; unknown keys (in files or
--set overrides) are rejected so ablation grids stay typo-proof.
"""

from __future__ import annotations

from .errors import ConfigError
from .network import NetworkConfig
from .training import TrainConfig

DEFAULTS = {
    "arch": "comb_stack",
    "depth": 8,
    "width": 64,
    "mode": "comb",
    "interleave": True,
    "bn_strategy": "pre_bn",
    "num_classes": 10,
    "input_channels": 3,
    "input_size": 32,
    "norm": "by_C_out",
    "epochs": 30,
    "batch_size": 100,
    "lr0": 0.1,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "seed": 0,
    "train_subset": 4000,
    "test_subset": 1000,
    "augment": True,
}

# full protocol: every image, 300 epochs (enable with --full)
FULL_PROTOCOL = {"epochs": 300, "train_subset": 0, "test_subset": 0}

_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _coerce(key, raw):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}") from None
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config(path=None, overrides=(), full=False):
    """Resolve a run config from (defaults, file, --full, overrides)."""
    cfg = dict(DEFAULTS)
    if path:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                cfg[key] = _coerce(key, raw)
    if full:
        cfg.update(FULL_PROTOCOL)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"override references unknown key {key!r}")
        cfg[key] = _coerce(key, raw)
    return cfg


def write_config(cfg, path):
    with open(path, "w") as f:
        for key in DEFAULTS:
            f.write(f"{key} = {cfg[key]}\n")


def network_config(cfg):
    return NetworkConfig(
        arch=cfg["arch"], depth=cfg["depth"], width=cfg["width"], mode=cfg["mode"],
        interleave=cfg["interleave"], bn_strategy=cfg["bn_strategy"],
        num_classes=cfg["num_classes"],
        input_shape=(cfg["input_channels"], cfg["input_size"], cfg["input_size"]),
        norm=cfg["norm"])


def train_config(cfg, seed=None):
    return TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr0=cfg["lr0"],
        momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        seed=cfg["seed"] if seed is None else seed)
