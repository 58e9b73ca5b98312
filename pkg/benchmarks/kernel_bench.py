"""Compare the numba and numpy pairwise-distance backends.

Usage: python3 benchmarks/kernel_bench.py [--n 4000] [--d 4] [--repeats 3]
"""

import argparse
import time

import numpy as np

from enar import kernels


def time_backend(name, X, Y, alpha, repeats):
    kernels.use_backend(name)
    kernels.cross_alpha_sums(X[:8], Y[:8], alpha)  # warm up jit / caches
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        row, col = kernels.cross_alpha_sums(X, Y, alpha)
        within = kernels.within_alpha_sums(X, alpha)
        best = min(best, time.perf_counter() - t0)
    return best, float(row.sum() + col.sum() + within.sum())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=4000, help="points per set")
    ap.add_argument("--d", type=int, default=4, help="point dimension")
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    X = rng.normal(size=(args.n, args.d))
    Y = rng.normal(size=(args.n, args.d))

    names = ["numpy"] + (["numba"] if kernels.numba_impl is not None else [])
    results = {}
    for name in names:
        secs, checksum = time_backend(name, X, Y, args.alpha, args.repeats)
        results[name] = (secs, checksum)
        pairs = 3 * args.n * args.n
        print(f"{name:>6}: {secs:8.3f} s   {pairs / secs / 1e6:8.1f} Mpair/s   checksum {checksum:.6e}")

    if len(results) == 2:
        print(f"speedup numba/numpy: {results['numpy'][0] / results['numba'][0]:.1f}x")
        rel = abs(results["numpy"][1] - results["numba"][1]) / abs(results["numpy"][1])
        print(f"checksum relative difference: {rel:.2e}")


if __name__ == "__main__":
    main()
