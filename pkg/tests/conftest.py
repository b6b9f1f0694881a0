import os

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def cifar_dir():
    path = os.environ.get("COMBNET_DATA")
    if path and os.path.exists(os.path.join(path, "data_batch_1.bin")):
        return path
    return None


requires_cifar = pytest.mark.skipif(
    cifar_dir() is None,
    reason="CIFAR-10 binary batches not found (set COMBNET_DATA)")


def write_synthetic_batch(path, n, seed=0, bad_label_at=None):
    """Write a canonical-format batch file with pseudo-random content."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = np.uint8(255 if i == bad_label_at else i % 10)
        pixels = rng.integers(0, 256, size=3072, dtype=np.uint8)
        records.append(np.concatenate([[label], pixels]).astype(np.uint8))
    with open(path, "wb") as f:
        f.write(np.concatenate(records).tobytes())
