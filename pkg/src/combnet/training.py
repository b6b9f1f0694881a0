"""SGD training loop with the step learning-rate schedule.

One seeded generator drives shuffling and augmentation, so a (seed, config,
data) triple reproduces the exact batch sequence and therefore bit-identical
history and checkpoints.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DivergenceError
from .data import augment
from .network import Network, save_checkpoint

HISTORY_HEADER = "epoch,train_loss,test_acc,lr,seconds"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 100
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_drop_points: tuple = (0.5, 0.75)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")


def lr_at(epoch, cfg: TrainConfig):
    """Step schedule: lr0, dropped by 10x at each configured fraction."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    frac = epoch / cfg.epochs
    drops = sum(1 for point in cfg.lr_drop_points if frac >= point)
    return cfg.lr0 * (0.1 ** drops)


def sgd_step(params, grads, velocity, lr, cfg: TrainConfig):
    """Momentum SGD with decoupled-by-name weight decay.

    params is a list of (name, array); decay applies to *.weight tensors
    (convolution and linear weights), not to BN gamma/beta or biases.
    """
    for (name, p), g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
        if cfg.weight_decay and name.endswith(".weight"):
            g = g + cfg.weight_decay * p
        v = velocity[name]
        v *= cfg.momentum
        v += g
        p -= lr * v


def evaluate(net: Network, dataset, batch_size=200):
    """Top-1 accuracy fraction with BN in eval mode."""
    correct = 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        xb = dataset.images[start:start + batch_size]
        logits = net.forward(xb, training=False)
        correct += int((logits.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    return correct / n


def train(net: Network, data, cfg: TrainConfig, out_dir=None, use_augment=True,
          clock=time.perf_counter, log=None):
    """Train on (train_ds, test_ds); returns the per-epoch history rows.

    History rows are (epoch, train_loss, test_acc, lr, seconds).  A history
    CSV plus checkpoints (at each LR drop and at the end) are written when
    out_dir is given.  `clock` exists so callers can inject a deterministic
    timer; all learned state is independent of it.
    """
    train_ds, test_ds = data
    rng = np.random.default_rng(cfg.seed)
    velocity = {name: np.zeros_like(p) for name, p in net.params()}
    history = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    n = len(train_ds)
    prev_lr = None
    for epoch in range(cfg.epochs):
        t0 = clock()
        lr = lr_at(epoch, cfg)
        if out_dir and prev_lr is not None and lr != prev_lr:
            save_checkpoint(net, os.path.join(out_dir, f"checkpoint_epoch{epoch}.bin"))
        prev_lr = lr
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if use_augment:
                xb = np.stack([augment(train_ds.images[i], rng) for i in idx])
            else:
                xb = train_ds.images[idx]
            yb = train_ds.labels[idx]
            logits = net.forward(xb, training=True)
            loss, grad = ops.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {start // cfg.batch_size}")
            net.backward(grad)
            sgd_step(net.params(), net.grads(), velocity, lr, cfg)
            losses.append(loss)
        test_acc = evaluate(net, test_ds)
        seconds = clock() - t0
        row = (epoch, float(np.mean(losses)), test_acc, lr, seconds)
        history.append(row)
        if log:
            log(f"epoch {epoch:3d}  loss {row[1]:.4f}  acc {test_acc:.4f}  "
                f"lr {lr:g}  {seconds:.1f}s")
    if out_dir:
        save_checkpoint(net, os.path.join(out_dir, "checkpoint_final.bin"))
        write_history(history, os.path.join(out_dir, "history.csv"))
    return history


def write_history(history, path):
    with open(path, "w") as f:
        f.write(HISTORY_HEADER + "\n")
        for epoch, loss, acc, lr, seconds in history:
            f.write(f"{epoch},{loss!r},{acc!r},{lr!r},{seconds!r}\n")
