#!/usr/bin/env python3
"""Benchmark the compiled geometry kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--sizes 256,1024,4096] [--repeats 5]

Times farthest point sampling and brute-force kNN on random clouds and
verifies both backends return identical indices on every case.
"""

import argparse
import time

import numpy as np

from upl import kernels


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="256,1024,4096")
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--k", type=int, default=8)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    if not kernels.COMPILED:
        print("compiled kernels unavailable; timing the reference backend only")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<10} {'n':>6} {'reference':>12} {'compiled':>12} {'speedup':>8}")
    for n in sizes:
        coords = rng.normal(size=(n, 3))
        fps_k = max(1, n // 8)
        cases = [
            ("fps", lambda b: kernels.farthest_point_sampling(coords, fps_k, backend=b)),
            ("knn", lambda b: kernels.knn_indices(coords, args.k, backend=b)),
        ]
        for name, call in cases:
            t_ref = time_call(lambda: call("reference"), args.repeats)
            if kernels.COMPILED:
                t_fast = time_call(lambda: call("compiled"), args.repeats)
                assert np.array_equal(call("reference"), call("compiled")), "backend mismatch"
                print(f"{name:<10} {n:>6} {t_ref * 1e3:>10.2f}ms {t_fast * 1e3:>10.2f}ms {t_ref / t_fast:>7.1f}x")
            else:
                print(f"{name:<10} {n:>6} {t_ref * 1e3:>10.2f}ms {'-':>12} {'-':>8}")


if __name__ == "__main__":
    main()
