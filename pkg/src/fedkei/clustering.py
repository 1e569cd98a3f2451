"""Global clustering of pooled modules: k-means++ seeding, Lloyd iterations,
and cluster-specific module construction.

Modules are clustered in their own flat parameter space with plain Euclidean
distance. Adapters and heads are always clustered independently by the
caller. Fixed (modules, K, seed) yields a bit-identical assignment.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import FedkeiError, InputError
from .paramspace import as_matrix, weighted_sum

MAX_ITER_DEFAULT = 100
TOL_DEFAULT = 1e-8


@dataclass(frozen=True)
class ClusterAssignment:
    """Hard partition of M module columns into K clusters."""

    B: np.ndarray          # (K, M) binary, each column sums to 1
    centroids: np.ndarray  # (K, dim) rows
    inertia: float

    @property
    def k(self) -> int:
        return self.B.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.B, axis=0)

    def validate(self):
        col = self.B.sum(axis=0)
        if not np.all(col == 1):
            raise FedkeiError("assignment is not a hard partition")
        if not np.all(self.B.sum(axis=1) >= 1):
            raise FedkeiError("assignment has an empty cluster")


def kmeanspp_seed(mods: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Standard k-means++ seeding over module columns; returns (k, dim) rows."""
    mods = as_matrix(mods)
    m = mods.shape[1]
    if not 1 <= k <= m:
        raise InputError(f"K={k} out of range [1, {m}]")
    X = np.ascontiguousarray(mods.T)
    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = np.empty((k, X.shape[1]))
    first = int(rng.integers(m))
    centroids[0] = X[first]
    d2 = kernels.pairwise_sq_dists(X, centroids[:1]).ravel()
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            pick = int(rng.choice(m, p=probs))
        else:
            pick = int(rng.integers(m))  # all residuals zero: duplicates
        centroids[c] = X[pick]
        d2 = np.minimum(d2, kernels.pairwise_sq_dists(X, centroids[c:c + 1]).ravel())
    return centroids


def _inertia(X, centroids, labels) -> float:
    diff = X - centroids[labels]
    return float(np.sum(diff * diff))


def lloyd(mods: np.ndarray, centroids: np.ndarray,
          max_iter: int = MAX_ITER_DEFAULT,
          tol: float = TOL_DEFAULT) -> ClusterAssignment:
    """Alternate assign/update until centroid movement < tol or max_iter.

    Empty clusters are repaired by reseeding from the point farthest from
    its assigned centroid; inertia is checked to be non-increasing at every
    iteration.
    """
    mods = as_matrix(mods)
    X = np.ascontiguousarray(mods.T)
    centroids = np.array(centroids, dtype=np.float64)
    if centroids.ndim != 2 or centroids.shape[1] != X.shape[1]:
        raise InputError("centroid dim does not match modules")
    k = centroids.shape[0]
    m = X.shape[0]
    if k > m:
        raise InputError(f"K={k} exceeds M={m}")

    prev_inertia = np.inf
    labels = None
    for _ in range(max_iter):
        d2 = kernels.pairwise_sq_dists(X, centroids)
        labels = np.argmin(d2, axis=1)

        # Repair empty clusters: move the globally farthest point in,
        # skipping points that would strand another cluster.
        while True:
            counts = np.bincount(labels, minlength=k)
            empties = np.flatnonzero(counts == 0)
            if empties.size == 0:
                break
            c = int(empties[0])
            dist = d2[np.arange(m), labels].copy()
            dist[counts[labels] <= 1] = -1.0
            far = int(np.argmax(dist))
            centroids[c] = X[far]
            labels[far] = c
            d2[:, c] = kernels.pairwise_sq_dists(X, centroids[c:c + 1]).ravel()

        inertia = _inertia(X, centroids, labels)
        if inertia > prev_inertia + 1e-9 * max(1.0, prev_inertia):
            raise FedkeiError("Lloyd inertia increased")
        prev_inertia = inertia

        new_centroids = centroids.copy()
        for c in range(k):
            new_centroids[c] = X[labels == c].mean(axis=0)
        shift = float(np.max(np.abs(new_centroids - centroids)))
        centroids = new_centroids
        if shift < tol:
            break

    d2 = kernels.pairwise_sq_dists(X, centroids)
    labels = np.argmin(d2, axis=1)
    B = np.zeros((k, m))
    B[labels, np.arange(m)] = 1.0
    assignment = ClusterAssignment(B=B, centroids=centroids,
                                   inertia=_inertia(X, centroids, labels))
    assignment.validate()
    return assignment


def cluster(mods: np.ndarray, k: int, seed: int,
            max_iter: int = MAX_ITER_DEFAULT,
            tol: float = TOL_DEFAULT,
            normalize: bool = False) -> ClusterAssignment:
    """k-means++ seeding followed by Lloyd; K is clamped to M by the caller.

    With ``normalize`` the columns are scaled to unit norm before clustering
    (zero columns left alone); the assignment still indexes the original
    columns. Off by default.
    """
    mods = as_matrix(mods)
    if normalize:
        norms = np.linalg.norm(mods, axis=0)
        mods = mods / np.where(norms == 0.0, 1.0, norms)
    return lloyd(mods, kmeanspp_seed(mods, k, seed), max_iter, tol)


def cluster_modules(assignment: ClusterAssignment, mods: np.ndarray) -> np.ndarray:
    """Per-cluster weighted mean of member columns; returns (K, dim) rows."""
    assignment.validate()
    mods = as_matrix(mods)
    out = np.empty((assignment.k, mods.shape[0]))
    for c in range(assignment.k):
        row = assignment.B[c]
        total = row.sum()
        if total == 0:
            raise FedkeiError("empty cluster row (repair missing upstream)")
        out[c] = weighted_sum(mods, row / total)
    return out


def assignment_to_text(assignment: ClusterAssignment) -> str:
    """Plain-text dump of the binary assignment matrix for inspection."""
    lines = [" ".join(str(int(v)) for v in row) for row in assignment.B]
    return "\n".join(lines) + "\n"
