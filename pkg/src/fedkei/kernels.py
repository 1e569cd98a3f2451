"""Hot numeric kernels: toy-model forward/backward and k-means distances.

The same source is either compiled with numba's ``@njit`` or left as plain
numpy, selected at import time by the ``FEDKEI_NUMBA`` environment variable
(``0``/``false``/``off`` forces the numpy path; anything else uses numba when
it is installed). Both paths are deterministic given identical inputs;
``benchmarks/bench_kernels.py`` compares them.

All arrays are contiguous float64. Model layout:
  P : (n_in, n_feat)  frozen backbone projection, tanh activation
  U : (n_in, r), V : (r, n_in)  low-rank adapter, x -> x + (x @ U) @ V
  w : (n_feat,), b : scalar     linear head
"""

import os

import numpy as np


def _numba_enabled() -> bool:
    flag = os.environ.get("FEDKEI_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = _numba_enabled()

if USE_NUMBA:
    from numba import njit

    _jit = njit(cache=True)
else:

    def _jit(f):
        return f


BACKEND = "numba" if USE_NUMBA else "numpy"


@_jit
def _stable_sigmoid(s):
    out = np.empty_like(s)
    for i in range(s.shape[0]):
        v = s[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + np.exp(-v))
        else:
            e = np.exp(v)
            out[i] = e / (1.0 + e)
    return out


@_jit
def logits(X, P, U, V, w, b):
    """Head logits for a batch: h(tanh((x + xUV) @ P))."""
    Z = X + (X @ U) @ V
    H = np.tanh(Z @ P)
    return H @ w + b


@_jit
def forward_loss(X, y, P, U, V, w, b):
    """Mean binary cross-entropy over the batch (stable softplus form)."""
    s = logits(X, P, U, V, w, b)
    n = s.shape[0]
    total = 0.0
    for i in range(n):
        v = s[i]
        # softplus(v) - y*v with softplus(v) = max(v,0) + log1p(exp(-|v|))
        total += max(v, 0.0) + np.log1p(np.exp(-abs(v))) - y[i] * v
    return total / n


@_jit
def forward_backward(X, y, P, U, V, w, b):
    """Loss plus exact gradients w.r.t. adapter (U, V) and head (w, b)."""
    A = X @ U
    Z = X + A @ V
    H = np.tanh(Z @ P)
    s = H @ w + b
    n = s.shape[0]

    total = 0.0
    for i in range(n):
        v = s[i]
        total += max(v, 0.0) + np.log1p(np.exp(-abs(v))) - y[i] * v
    loss = total / n

    ds = (_stable_sigmoid(s) - y) / n
    db = np.sum(ds)
    dw = H.T @ ds
    dH = np.outer(ds, w)
    dZP = dH * (1.0 - H * H)
    dZ = dZP @ P.T
    dA = dZ @ V.T
    dU = X.T @ dA
    dV = A.T @ dZ
    return loss, dU, dV, dw, db


@_jit
def pairwise_sq_dists(X, C):
    """Squared Euclidean distances between rows of X (m,d) and C (k,d)."""
    m = X.shape[0]
    k = C.shape[0]
    d = X.shape[1]
    out = np.empty((m, k))
    for i in range(m):
        for j in range(k):
            acc = 0.0
            for a in range(d):
                diff = X[i, a] - C[j, a]
                acc += diff * diff
            out[i, j] = acc
    return out


def python_impls():
    """Uncompiled versions of every kernel (used by the benchmark)."""
    fns = (logits, forward_loss, forward_backward, pairwise_sq_dists,
           _stable_sigmoid)
    if USE_NUMBA:
        return {f.py_func.__name__: f.py_func for f in fns}
    return {f.__name__: f for f in fns}
