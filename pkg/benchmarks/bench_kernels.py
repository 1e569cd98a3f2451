"""Timing comparison of the compiled and plain-numpy kernel paths.

Run with numba active (the default) so both versions are importable:

    python3 benchmarks/bench_kernels.py

The compiled functions are warmed up once before timing so JIT compilation
is not counted. Inputs are identical for both paths; the script also checks
that the two implementations agree to within floating-point rounding (the
compiled and interpreted matmuls may differ in the last ulp).
"""

import time

import numpy as np

from fedkei import kernels
from fedkei.kernels import BACKEND, python_impls


def flatten(out):
    seq = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.asarray(o, dtype=np.float64).ravel()
                           for o in seq])


def bench(fn, args, repeats):
    fn(*args)  # warmup (triggers compilation on the jit path)
    start = time.perf_counter()
    for _ in range(repeats):
        out = fn(*args)
    return (time.perf_counter() - start) / repeats, out


def main():
    if BACKEND != "numba":
        print("numba is not active (FEDKEI_NUMBA=0 or not installed); "
              "both columns below run the same plain-numpy code.")
    plain = python_impls()
    rng = np.random.default_rng(0)

    n, n_in, n_feat, r = 512, 16, 32, 2
    X = rng.standard_normal((n, n_in))
    y = rng.integers(0, 2, n).astype(float)
    P = rng.standard_normal((n_in, n_feat)) / np.sqrt(n_in)
    U = 0.1 * rng.standard_normal((n_in, r))
    V = 0.1 * rng.standard_normal((r, n_in))
    w = 0.1 * rng.standard_normal(n_feat)
    b = 0.05
    M = rng.standard_normal((200, 97))
    C = rng.standard_normal((5, 97))

    cases = [
        ("logits", kernels.logits, (X, P, U, V, w, b), 2000),
        ("forward_loss", kernels.forward_loss, (X, y, P, U, V, w, b), 2000),
        ("forward_backward", kernels.forward_backward,
         (X, y, P, U, V, w, b), 1000),
        ("pairwise_sq_dists", kernels.pairwise_sq_dists, (M, C), 1000),
    ]

    print(f"{'kernel':<20} {'active (' + BACKEND + ')':>16} "
          f"{'plain numpy':>14} {'speedup':>9}")
    for name, fn, args, repeats in cases:
        t_active, out_a = bench(fn, args, repeats)
        t_plain, out_p = bench(plain[name], args, repeats)
        agree = np.allclose(flatten(out_a), flatten(out_p),
                            rtol=1e-12, atol=1e-14)
        print(f"{name:<20} {t_active * 1e6:>13.1f}us {t_plain * 1e6:>12.1f}us "
              f"{t_plain / t_active:>8.2f}x  {'ok' if agree else 'MISMATCH'}")


if __name__ == "__main__":
    main()
