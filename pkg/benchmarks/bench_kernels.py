#!/usr/bin/env python3
"""Timing comparison of the numba kernels against the numpy fallbacks.

Run:  python benchmarks/bench_kernels.py [--reps 200]
The active training backend is chosen at import time by FAIRCDA_NUMBA; this
script always times both implementations side by side.
"""

import argparse
import time

import numpy as np

from faircda import kernels


def time_fn(fn, args, reps):
    fn(*args)  # warm-up (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--rows", type=int, default=1000)
    ap.add_argument("--cols", type=int, default=200)
    args = ap.parse_args()

    if kernels.NUMBA_IMPL is None:
        print("numba unavailable or disabled (FAIRCDA_NUMBA=0): nothing to compare")
        return

    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.rows, args.cols))
    g = rng.standard_normal((args.rows, args.cols))
    alpha = rng.uniform(0, 500, args.rows)
    p = rng.standard_normal(x.size)
    grad = rng.standard_normal(x.size)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    cases = {
        "sigmoid": ((x,), (x,)),
        "relu": ((x,), (x,)),
        "row_dot": ((x, g), (x, g)),
        "perturb_delta": ((g, alpha, 1e-12), (g, alpha, 1e-12)),
        "adam_update": ((p, grad, m, v, 1, 1e-3, 0.9, 0.999, 1e-8),
                        (p.copy(), grad, m.copy(), v.copy(), 1, 1e-3, 0.9, 0.999, 1e-8)),
    }

    print(f"array {args.rows}x{args.cols}, {args.reps} reps")
    print(f"{'kernel':<14} {'numpy (us)':>12} {'numba (us)':>12} {'speedup':>9}")
    for name, (np_args, nb_args) in cases.items():
        t_np = time_fn(kernels.NUMPY_IMPL[name], np_args, args.reps)
        t_nb = time_fn(kernels.NUMBA_IMPL[name], nb_args, args.reps)
        print(f"{name:<14} {t_np*1e6:>12.1f} {t_nb*1e6:>12.1f} {t_np/t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
