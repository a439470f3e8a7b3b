"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Inputs match the default worker trunk (16x16 frames, m=10) and a t-SNE run
over 150 action windows. The first numba call is a warm-up so compile time
is not counted.
"""
import argparse
import timeit

import numpy as np

from feudal_steering import _kernels as K


def cases(rng):
    xp = rng.standard_normal((1, 8, 40, 18, 18))
    cols = K.NUMPY_KERNELS["im2col3d"](xp, 2, 3, 3, 1, 1, 1)
    x = rng.standard_normal((150, 10))
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None] - 2 * x @ x.T, 0)
    np.fill_diagonal(d2, 0)
    y = rng.standard_normal((150, 2))
    p = np.exp(-d2)
    np.fill_diagonal(p, 0)
    p = (p + p.T) / (p + p.T).sum()
    pts = rng.standard_normal((5000, 2))
    cents = rng.standard_normal((20, 2))
    return {
        "im2col3d": (xp, 2, 3, 3, 1, 1, 1),
        "col2im3d": (cols, xp.shape, 2, 3, 3, 1, 1, 1, 39, 16, 16),
        "perplexity_search": (d2, 30.0, 1e-5, 200),
        "tsne_gradient": (y, p),
        "nearest_centroid": (pts, cents),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, call_args in cases(np.random.default_rng(0)).items():
        times = {}
        for label, table in (("numpy", K.NUMPY_KERNELS), ("numba", K.NUMBA_KERNELS)):
            fn = table[name]
            fn(*call_args)
            best = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
            times[label] = best * 1e3
        print(f"{name:<20}{times['numpy']:>12.3f}{times['numba']:>12.3f}{times['numpy'] / times['numba']:>9.1f}x")


if __name__ == "__main__":
    main()
