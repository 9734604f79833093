"""Compare the numba and numpy paths of the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once untimed (JIT warm-up), then best-of-``repeat``
wall time is reported for both paths along with the speedup.
"""

import argparse
import timeit

import numpy as np

from cbmlab._kernels import numba_impl, numpy_impl


def cases(rng):
    x = rng.normal(size=(20000, 32))
    idx_max = rng.integers(0, 32, size=(20000, 3))
    idx_min = rng.integers(0, 32, size=(20000, 3))
    fmax, fmin = x.max(axis=0), x.min(axis=0)
    scores = rng.normal(size=200000)
    labels = (rng.random(200000) < 0.3).astype(np.int64)
    S = np.array([0, 3], dtype=np.int64)
    vals = np.array([1, 0], dtype=np.int64)
    return {
        "posterior_counts K=20": ("posterior_counts", (20, 1000, S, vals)),
        "salt_pepper 20000x32": ("salt_pepper", (x, idx_max, idx_min, fmax, fmin)),
        "rank_auc n=200000": ("rank_auc", (scores, labels)),
    }


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if numba_impl is None:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for label, (name, argv) in cases(rng).items():
        times = {}
        for impl_name, impl in (("numpy", numpy_impl), ("numba", numba_impl)):
            fn = getattr(impl, name)
            fn(*argv)
            times[impl_name] = min(timeit.repeat(lambda: fn(*argv), number=1, repeat=args.repeat)) * 1e3
        a, b = getattr(numpy_impl, name)(*argv), getattr(numba_impl, name)(*argv)
        assert np.allclose(a, b), label
        print(f"{label:<24}{times['numpy']:>12.2f}{times['numba']:>12.2f}{times['numpy'] / times['numba']:>9.1f}x")


if __name__ == "__main__":
    main()
