"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from shapediff import _pykernels

try:
    from shapediff import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    X = rng.normal(size=(512, 3)) * 3
    Q = rng.normal(size=(4000, 3)) * 3
    centers = rng.normal(size=(30, 3)) * 2
    radii = rng.uniform(1.2, 1.9, size=30)
    owner = rng.integers(0, 30, size=len(Q))
    alpha = rng.uniform(0.5, 1.0, size=30)
    return {
        "knn_indices(512, k=20)": lambda m: m.knn_indices(X, 20),
        "sphere_sdf(4000 q, 30 atoms)": lambda m: m.sphere_sdf(Q, centers, radii),
        "buried_mask(4000 p, 30 atoms)": lambda m: m.buried_mask(Q, owner, centers, radii),
        "gaussian_overlap(30 x 30)": lambda m: m.gaussian_overlap(centers, alpha, centers[::-1].copy(), alpha, 2.7),
        "nn_mean(512 x, 4000 q, n=5)": lambda m: m.nn_mean(X, Q, 5),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=10)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=args.number, repeat=args.repeat)) / args.number
        if _ckernels is None:
            print(f"{name:34s} {py * 1e3:10.3f}")
            continue
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:34s} {py * 1e3:10.3f} {cy * 1e3:10.3f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
