"""CIFAR-10 ingestion and augmentation.

Reads the canonical binary batches: 3073-byte records, one label byte then
3072 pixel bytes as channel-major R, G, B planes of 1024 bytes.  Pixels are
scaled to [0, 1] and standardized by the train split's per-channel mean/std.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, LabelError

RECORD_BYTES = 3073
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]
NUM_CLASSES = 10


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32) float64, standardized
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    split: str

    def __len__(self):
        return self.images.shape[0]


def data_dir_from_env(explicit=None):
    path = explicit or os.environ.get("COMBNET_DATA")
    if not path:
        raise DataError("no dataset directory: pass --data or set COMBNET_DATA")
    return path


def _read_batch(path):
    if not os.path.exists(path):
        raise DataError(f"{path}: file not found")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % RECORD_BYTES:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise DataError(f"{path}: truncated record at byte offset {offset} "
                        f"(file has {len(raw)} bytes, records are {RECORD_BYTES})")
    n = len(raw) // RECORD_BYTES
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= NUM_CLASSES)[0]
    if bad.size:
        raise LabelError(f"{path}: label byte {labels[bad[0]]} out of range "
                         f"[0, {NUM_CLASSES}) in record {bad[0]}")
    images = arr[:, 1:].reshape(n, 3, 32, 32).astype(np.float64)
    return images, labels


def load_cifar10(data_dir, n_train=None, n_test=None):
    """Load (train, test) datasets, optionally truncated to leading subsets.

    Standardization statistics come from the returned train split, so the
    train images have per-channel mean 0 and std 1 exactly as loaded.
    """
    train_parts = [_read_batch(os.path.join(data_dir, f)) for f in TRAIN_FILES]
    test_parts = [_read_batch(os.path.join(data_dir, f)) for f in TEST_FILES]
    train_x = np.concatenate([p[0] for p in train_parts])
    train_y = np.concatenate([p[1] for p in train_parts])
    test_x = np.concatenate([p[0] for p in test_parts])
    test_y = np.concatenate([p[1] for p in test_parts])
    if n_train is not None:
        train_x, train_y = train_x[:n_train], train_y[:n_train]
    if n_test is not None:
        test_x, test_y = test_x[:n_test], test_y[:n_test]
    train_x = train_x / 255.0
    test_x = test_x / 255.0
    mean = train_x.mean(axis=(0, 2, 3), keepdims=True)
    std = train_x.std(axis=(0, 2, 3), keepdims=True)
    train_x = (train_x - mean) / std
    test_x = (test_x - mean) / std
    return (Dataset(np.ascontiguousarray(train_x), train_y, "train"),
            Dataset(np.ascontiguousarray(test_x), test_y, "test"))


def augment(img, rng):
    """Pad 4, random 32x32 crop, mirror with probability 0.5.

    Draws from rng in a fixed order (row offset, col offset, flip), so the
    result is a pure function of the generator state.
    """
    c, h, w = img.shape
    canvas = np.zeros((c, h + 8, w + 8), dtype=np.float64)
    canvas[:, 4:4 + h, 4:4 + w] = img
    dy = int(rng.integers(0, 9))
    dx = int(rng.integers(0, 9))
    out = canvas[:, dy:dy + h, dx:dx + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)
