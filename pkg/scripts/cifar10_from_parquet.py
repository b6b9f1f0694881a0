#!/usr/bin/env python3
"""Rebuild canonical CIFAR-10 binary batches from HuggingFace parquet files.

The loader in this package reads the classic binary format (3073-byte
records: label byte + 3072 channel-major pixel bytes).  When the original
tar.gz mirror is unreachable, the dataset can be fetched as parquet from
huggingface (datasets/uoft-cs/cifar10, plain_text config) and converted:

    python scripts/cifar10_from_parquet.py train.parquet test.parquet OUTDIR

Requires pyarrow and Pillow.
"""

import io
import sys

import numpy as np
import pyarrow.parquet as pq
from PIL import Image


def records(parquet_path):
    table = pq.read_table(parquet_path)
    imgs = table.column("img").to_pylist()
    labels = table.column("label").to_pylist()
    out = bytearray()
    for img, label in zip(imgs, labels):
        arr = np.asarray(Image.open(io.BytesIO(img["bytes"])).convert("RGB"))
        if arr.shape != (32, 32, 3):
            raise SystemExit(f"unexpected image shape {arr.shape}")
        out.append(label)
        out.extend(arr.transpose(2, 0, 1).tobytes())  # channel-major planes
    return bytes(out), len(labels)


def main(train_pq, test_pq, outdir):
    import os

    os.makedirs(outdir, exist_ok=True)
    train, n = records(train_pq)
    if n != 50000:
        raise SystemExit(f"expected 50000 train records, got {n}")
    record = 3073
    for i in range(5):
        with open(os.path.join(outdir, f"data_batch_{i + 1}.bin"), "wb") as f:
            f.write(train[i * 10000 * record:(i + 1) * 10000 * record])
    test, n = records(test_pq)
    if n != 10000:
        raise SystemExit(f"expected 10000 test records, got {n}")
    with open(os.path.join(outdir, "test_batch.bin"), "wb") as f:
        f.write(test)
    print(f"wrote 5 train batches + test batch to {outdir}")


if __name__ == "__main__":
    if len(sys.argv) != 4:
        raise SystemExit(__doc__)
    main(*sys.argv[1:])
