#!/usr/bin/env python3
"""Side-by-side benchmark of the numba and numpy kernel paths.

Times each hot kernel on realistic shapes, validates that both paths agree
numerically, and prints a speedup table. The numba path is warmed up first
so JIT compilation is not counted.
"""

import time

import numpy as np

from episampler import kernels


def _time(fn, args, repeats):
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def main():
    if not kernels._HAVE_NUMBA:
        print("numba unavailable: nothing to compare")
        return
    rng = np.random.default_rng(0)

    # shapes mirror a 5-way 15-query episode with a 64-wide embedding
    x = rng.standard_normal((75, 64))
    y = rng.standard_normal((5, 64))
    logits = rng.standard_normal((75, 5))
    labels = rng.integers(0, 5, size=75).astype(np.int64)
    p = rng.standard_normal(64 * 64)
    g = rng.standard_normal(64 * 64)
    m = np.zeros(64 * 64)
    v = np.zeros(64 * 64)

    cases = [
        ("pairwise_sqdist", kernels._pairwise_sqdist_numpy, kernels._pairwise_sqdist_numba,
         (x, y), 2000),
        ("softmax_xent", kernels._softmax_xent_numpy, kernels._softmax_xent_numba,
         (logits, labels), 2000),
        ("adam_update", kernels._adam_update_numpy, kernels._adam_update_numba,
         (p, g, m, v, 10, 1e-3, 0.9, 0.999, 1e-8), 2000),
    ]

    print("Warming up numba JIT...")
    for _, _, fn_nb, args, _ in cases:
        fn_nb(*args)

    print(f"{'kernel':>16}  {'numpy (us)':>11}  {'numba (us)':>11}  {'speedup':>8}  {'agree':>6}")
    print("-" * 62)
    for name, fn_np, fn_nb, args, repeats in cases:
        out_np = fn_np(*args)
        out_nb = fn_nb(*args)
        if isinstance(out_np, tuple):
            agree = all(np.allclose(a, b, atol=1e-12) for a, b in zip(out_np, out_nb))
        else:
            agree = np.allclose(out_np, out_nb, atol=1e-12)
        t_np = _time(fn_np, args, repeats)
        t_nb = _time(fn_nb, args, repeats)
        print(
            f"{name:>16}  {t_np * 1e6:>11.2f}  {t_nb * 1e6:>11.2f}  "
            f"{t_np / t_nb:>7.1f}x  {'ok' if agree else 'FAIL':>6}"
        )


if __name__ == "__main__":
    main()
