"""Benchmark the jitted kernels against their pure-numpy fallbacks.

Runs each kernel on attack-realistic shapes and prints a timing table.
The numba path is skipped (with a note) when numba is unavailable or
disabled via FEDLEAK_DISABLE_NUMBA.

Usage: python benchmarks/bench_kernels.py [--repeats 200]
"""
import argparse
import time

import numpy as np

from fedleak import _kernels
from fedleak._kernels import (
    mean_softmax_numpy,
    pgd_simplex_ls_numpy,
    project_simplex_numpy,
)


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    draws_big = rng.normal(size=(10000, 10)) * 2.0
    draws_small = rng.normal(size=(1000, 10)) * 2.0
    v = rng.normal(size=10) * 3.0
    a = rng.normal(size=(10, 10))
    u = rng.normal(size=10)
    step = 1.0 / np.linalg.norm(a.T @ a, 2)
    return [
        ("mean_softmax 10000x10", lambda f: f(draws_big),
         _kernels.mean_softmax if _kernels.NUMBA_ENABLED else None, mean_softmax_numpy),
        ("mean_softmax 1000x10", lambda f: f(draws_small),
         _kernels.mean_softmax if _kernels.NUMBA_ENABLED else None, mean_softmax_numpy),
        ("project_simplex n=10", lambda f: f(v.copy()),
         _kernels.project_simplex if _kernels.NUMBA_ENABLED else None, project_simplex_numpy),
        ("pgd_simplex_ls n=10", lambda f: f(a, u, step, 1e-10, 10000),
         _kernels.pgd_simplex_ls if _kernels.NUMBA_ENABLED else None, pgd_simplex_ls_numpy),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    rows = []
    for name, call, jit_fn, np_fn in cases(rng):
        t_np = best_of(lambda: call(np_fn), args.repeats)
        if jit_fn is None:
            rows.append((name, t_np, None, None))
            continue
        call(jit_fn)  # compile before timing
        t_jit = best_of(lambda: call(jit_fn), args.repeats)
        rows.append((name, t_np, t_jit, t_np / t_jit))

    print(f"numba path: {'enabled' if _kernels.NUMBA_ENABLED else 'DISABLED'}")
    print(f"{'kernel':<24} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name, t_np, t_jit, ratio in rows:
        if t_jit is None:
            print(f"{name:<24} {t_np * 1e6:>10.1f}us {'-':>12} {'-':>9}")
        else:
            print(f"{name:<24} {t_np * 1e6:>10.1f}us {t_jit * 1e6:>10.1f}us {ratio:>8.1f}x")


if __name__ == "__main__":
    main()
