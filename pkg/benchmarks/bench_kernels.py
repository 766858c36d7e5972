"""Time the numba and numpy kernel backends and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 256]
"""
import argparse
import time

import numpy as np

from ssfl import kernels
from ssfl._accel import HAVE_NUMBA


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size, rng):
    img = rng.random((size, size))
    mask = rng.random((size, size)) < 0.55
    x = rng.standard_normal((16, 8, 50, 50))
    cols = kernels.im2col_numpy(x, 3, 2, 1)
    return {
        "min_filter k=3": ("min_filter", (img, 3)),
        "min_filter k=7": ("min_filter", (img, 7)),
        "fill_holes": ("fill_holes", (mask,)),
        "im2col 3x3/2": ("im2col", (x, 3, 2, 1)),
        "col2im 3x3/2": ("col2im", (cols, x.shape, 3, 2, 1)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=256)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  equal")
    for label, (name, call) in cases(args.size, rng).items():
        f_np = getattr(kernels, f"{name}_numpy")
        f_nb = getattr(kernels, f"{name}_numba")
        equal = np.array_equal(f_np(*call), f_nb(*call))  # also warms up the jit
        t_np = best_of(lambda: f_np(*call), args.repeat)
        t_nb = best_of(lambda: f_nb(*call), args.repeat)
        print(f"{label:<16} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>8.1f}  {equal}")


if __name__ == "__main__":
    main()
