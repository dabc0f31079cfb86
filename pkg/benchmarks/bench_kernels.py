#!/usr/bin/env python3
"""Benchmark the compiled convolution kernels against the numpy fallback.

Times forward and backward passes at training- and deployment-scale shapes
and prints one row per (op, shape) with the speed ratio.

    python benchmarks/bench_kernels.py [--reps N] [--quick]
"""

import argparse
import time

import numpy as np

from lsnet import _kernels_np
from lsnet import backend

try:
    from lsnet import _kernels
except ImportError:
    _kernels = None

CONV_SHAPES = [
    # (n, ci, co, h, w, stride)  roughly the layers of the phantom-scale net
    (4, 5, 16, 64, 64, 1),
    (4, 16, 16, 64, 64, 1),
    (4, 16, 32, 64, 64, 2),
    (4, 32, 32, 32, 32, 1),
    (4, 64, 64, 16, 16, 1),
    # deployment-size slices of the full-scale model
    (1, 5, 64, 480, 480, 1),
    (1, 64, 64, 480, 480, 1),
    (1, 128, 128, 240, 240, 1),
]

TCONV_SHAPES = [
    (4, 32, 16, 32, 32),
    (4, 64, 32, 16, 16),
    (1, 128, 64, 240, 240),
]


def _time(fn, reps):
    fn()  # warm up
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(mod, shape, reps, backward):
    n, ci, co, h, w, stride = shape
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, ci, h, w)).astype(np.float32)
    wt = rng.standard_normal((co, ci, 3, 3)).astype(np.float32)
    b = rng.standard_normal(co).astype(np.float32)
    if backward:
        g = np.ascontiguousarray(
            rng.standard_normal(mod.conv2d_forward(x, wt, b, stride, 1).shape)
            .astype(np.float32))
        return _time(lambda: mod.conv2d_backward(x, wt, g, stride, 1), reps)
    return _time(lambda: mod.conv2d_forward(x, wt, b, stride, 1), reps)


def bench_tconv(mod, shape, reps, backward):
    n, ci, co, h, w = shape
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, ci, h, w)).astype(np.float32)
    wt = rng.standard_normal((ci, co, 2, 2)).astype(np.float32)
    b = rng.standard_normal(co).astype(np.float32)
    if backward:
        g = np.ascontiguousarray(
            rng.standard_normal((n, co, 2 * h, 2 * w)).astype(np.float32))
        return _time(lambda: mod.tconv2d_backward(x, wt, g), reps)
    return _time(lambda: mod.tconv2d_forward(x, wt, b), reps)


def gflops_conv(shape):
    n, ci, co, h, w, stride = shape
    oh, ow = h // stride, w // stride
    return 2.0 * n * co * ci * 9 * oh * ow / 1e9


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--quick", action="store_true",
                    help="skip the deployment-size shapes")
    args = ap.parse_args()

    if _kernels is None:
        print("compiled extension not built; only the numpy fallback is "
              "available (pip install -e . --no-build-isolation)")
        return

    print(f"active backend: {backend.BACKEND}")
    header = (f"{'op':<14} {'shape':<28} {'cython ms':>10} {'numpy ms':>10} "
              f"{'ratio':>7} {'cy GF/s':>8}")
    print(header)
    print("-" * len(header))

    conv_shapes = CONV_SHAPES[:5] if args.quick else CONV_SHAPES
    tconv_shapes = TCONV_SHAPES[:2] if args.quick else TCONV_SHAPES

    for backward in (False, True):
        tag = "conv bwd" if backward else "conv fwd"
        for shape in conv_shapes:
            t_cy = bench_conv(_kernels, shape, args.reps, backward)
            t_np = bench_conv(_kernels_np, shape, args.reps, backward)
            gf = gflops_conv(shape) * (2.0 if backward else 1.0)
            print(f"{tag:<14} {str(shape):<28} {t_cy * 1e3:>10.2f} "
                  f"{t_np * 1e3:>10.2f} {t_np / t_cy:>7.2f} "
                  f"{gf / t_cy:>8.1f}")
    for backward in (False, True):
        tag = "tconv bwd" if backward else "tconv fwd"
        for shape in tconv_shapes:
            t_cy = bench_tconv(_kernels, shape, args.reps, backward)
            t_np = bench_tconv(_kernels_np, shape, args.reps, backward)
            print(f"{tag:<14} {str(shape):<28} {t_cy * 1e3:>10.2f} "
                  f"{t_np * 1e3:>10.2f} {t_np / t_cy:>7.2f} {'':>8}")

    print("\nratio > 1 means the compiled kernel is faster.")


if __name__ == "__main__":
    main()
