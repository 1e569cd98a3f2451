"""Flat parameter-vector arithmetic, serialization, and the finite-difference
gradient oracle used by every gradient test.

A module vector is a 1-D float64 array; a module matrix is a (dim, M) float64
array whose columns are module vectors in pool order. All operations are pure.
"""

import struct

import numpy as np

from .errors import InputError, OracleError

FD_EPS_DEFAULT = 1e-6


def as_vector(values) -> np.ndarray:
    """Validate and return a module vector (finite 1-D float64)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InputError(f"module vector must be 1-D and nonempty, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InputError("module vector contains non-finite entries")
    return v


def as_matrix(columns) -> np.ndarray:
    """Stack module vectors into a (dim, M) matrix, preserving column order."""
    if isinstance(columns, np.ndarray) and columns.ndim == 2:
        mat = np.asarray(columns, dtype=np.float64)
    else:
        cols = [as_vector(c) for c in columns]
        if not cols:
            raise InputError("module matrix needs at least one column")
        dims = {c.shape[0] for c in cols}
        if len(dims) != 1:
            raise InputError(f"columns have mixed dims {sorted(dims)}")
        mat = np.stack(cols, axis=1)
    if not np.all(np.isfinite(mat)):
        raise InputError("module matrix contains non-finite entries")
    return mat


def weighted_sum(mods: np.ndarray, w) -> np.ndarray:
    """Linear combination of columns: result[d] = sum_j w[j] * mods[d, j].

    Accumulation runs in ascending column index so repeated runs are
    bit-reproducible.
    """
    mods = as_matrix(mods)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != mods.shape[1]:
        raise InputError(
            f"weight length {w.shape} does not match {mods.shape[1]} columns")
    if not np.all(np.isfinite(w)):
        raise InputError("non-finite weight")
    out = np.zeros(mods.shape[0])
    for j in range(mods.shape[1]):
        out += w[j] * mods[:, j]
    return out


def finite_diff_grad(f, x: np.ndarray, eps: float = FD_EPS_DEFAULT) -> np.ndarray:
    """Central-difference gradient of a scalar function of a module vector."""
    if eps <= 0:
        raise InputError("eps must be positive")
    x = as_vector(x)
    g = np.empty_like(x)
    for d in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[d] += eps
        xm[d] -= eps
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"function returned non-finite value at component {d}")
        g[d] = (fp - fm) / (2.0 * eps)
    return g


def rel_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """max|a - g| / max(1, max|g|) -- the comparison used by gradient checks."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.max(np.abs(approx - exact)) / max(1.0, np.max(np.abs(exact))))


def vector_to_bytes(v: np.ndarray) -> bytes:
    """Serialize: u32 little-endian dim header + little-endian float64 values."""
    v = as_vector(v)
    return struct.pack("<I", v.size) + v.astype("<f8").tobytes()


def vector_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise InputError("buffer too short for dim header")
    (dim,) = struct.unpack("<I", buf[:4])
    expected = 4 + 8 * dim
    if len(buf) != expected:
        raise InputError(f"buffer length {len(buf)} != expected {expected} for dim {dim}")
    return np.frombuffer(buf[4:], dtype="<f8").astype(np.float64)


def vector_byte_size(dim: int) -> int:
    return 4 + 8 * dim
