#!/usr/bin/env python3
"""Compare the compiled kernels against the numpy fallback.

Times forward and backward comb convolution on training-shaped layers and
prints a speedup table plus a bit-exactness check of the forward results.

    python benchmarks/bench_backends.py [--batch 100] [--iters 3]
"""

import argparse
import time

import numpy as np

from combnet.backend import get_backend

SHAPES = [
    # (c_in, c_out, hw, label)
    (3, 64, 32, "stem 3->64 @32"),
    (32, 32, 32, "width-32 @32"),
    (64, 64, 32, "width-64 @32"),
    (64, 64, 16, "width-64 @16"),
    (64, 64, 8, "width-64 @8"),
]


def best_of(fn, iters):
    best = float("inf")
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=100)
    ap.add_argument("--iters", type=int, default=3)
    args = ap.parse_args()

    try:
        compiled = get_backend("compiled")
    except ImportError:
        raise SystemExit("compiled extension not built; run pip install -e .")
    fallback = get_backend("numpy")
    rng = np.random.default_rng(0)

    print(f"batch={args.batch}, best of {args.iters}, 3x3 comb convolution")
    print(f"{'layer':<16} {'pass':<4} {'compiled':>10} {'numpy':>10} {'speedup':>8}")
    for c_in, c_out, hw, label in SHAPES:
        x = rng.standard_normal((args.batch, c_in, hw, hw))
        w = rng.standard_normal((c_out, c_in, 3, 3))
        phases = (np.arange(c_out) % 2).astype(np.uint8)
        inv_d = 1.0 / c_out
        fwd_args = (x, w, 1, 1, 1, phases, inv_d)

        y_c = compiled.comb_forward(*fwd_args)
        y_n = fallback.comb_forward(*fwd_args)
        assert np.array_equal(y_c, y_n), "backends disagree"
        go = rng.standard_normal(y_c.shape)
        bwd_args = (x, w, go, 1, 1, 1, phases, inv_d)

        tc = best_of(lambda: compiled.comb_forward(*fwd_args), args.iters)
        tn = best_of(lambda: fallback.comb_forward(*fwd_args), args.iters)
        print(f"{label:<16} fwd  {tc * 1e3:9.1f}ms {tn * 1e3:9.1f}ms {tn / tc:7.1f}x")
        tc = best_of(lambda: compiled.comb_backward(*bwd_args), args.iters)
        tn = best_of(lambda: fallback.comb_backward(*bwd_args), args.iters)
        print(f"{label:<16} bwd  {tc * 1e3:9.1f}ms {tn * 1e3:9.1f}ms {tn / tc:7.1f}x")
    print("forward results are bit-identical across backends")


if __name__ == "__main__":
    main()
