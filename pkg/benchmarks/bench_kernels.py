"""Time the compiled kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best-of-N wall time of each backend,
the speedup, and the max absolute difference between their outputs.
"""
import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from ctcascade.kernels import compiled_available, get_backend


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(rng):
    x = rng.standard_normal((16, 64, 40, 40)).astype(np.float32)
    cols = rng.standard_normal((16, 64 * 9, 40 * 40)).astype(np.float32)
    n = 128
    img = rng.random((n, n))
    theta = np.linspace(0, np.pi, 180, endpoint=False)
    n_det = int(np.ceil(n * np.sqrt(2))) + 2
    det = (np.arange(n_det) - (n_det - 1) / 2.0)
    ray = np.arange(-n_det / 2.0, n_det / 2.0, 0.5)
    sino = rng.standard_normal((180, n_det))
    grid = np.arange(0, 80 - 13 + 1)[:60]
    patches = rng.standard_normal((grid.size ** 2, 13, 13))
    corners = np.array([(r, c) for r in grid for c in grid], dtype=np.int64)
    weights = np.ones((13, 13))
    center = (n - 1) / 2.0
    return {
        "im2col 16x64x40x40": lambda k: k.im2col(x, 3, 3),
        "col2im 16x64x40x40": lambda k: k.col2im(cols, x.shape, 3, 3),
        "radon 128^2 x 180": lambda k: k.radon_project(img, np.cos(theta), np.sin(theta), det, ray, center),
        "backproject 180 -> 128^2": lambda k: k.backproject(sino, np.cos(theta), np.sin(theta),
                                                            det[0], 1.0, n, center),
        "aggregate 3600 x 13^2": lambda k: k.aggregate_patches(patches, corners, (80, 80), weights),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if not compiled_available():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    py, cc = get_backend("python"), get_backend("compiled")
    print(f"{'kernel':<26}{'python ms':>11}{'compiled ms':>13}{'speedup':>9}{'max |diff|':>12}")
    with threadpool_limits(1):
        for name, fn in cases(np.random.default_rng(args.seed)).items():
            tp, op = best_of(lambda: fn(py), args.repeat)
            tc, oc = best_of(lambda: fn(cc), args.repeat)
            if isinstance(op, tuple):
                diff = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in zip(op, oc))
            else:
                diff = float(np.max(np.abs(np.asarray(op) - np.asarray(oc))))
            print(f"{name:<26}{tp * 1e3:>11.2f}{tc * 1e3:>13.2f}{tp / tc:>9.2f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
