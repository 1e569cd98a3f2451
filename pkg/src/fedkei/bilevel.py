"""Bi-level aggregation-weight learning.

Intra-cluster weights (beta, one dense row of length M per cluster) form the
cluster-specific modules; inter-cluster weights (alpha, length K) combine
them into one aggregated module per client. Clients update alpha in the
inner loop; the server updates beta in the outer loop through the inner
update, using a rank-1 form of the Jacobian that never materializes a
dim x dim matrix.

Everything here is generic over module "parts": operations take dicts keyed
by part name (adapter / head in the simulator, a single key in unit tests)
and a gradient callback evaluating the task loss at an assembled module.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, FedkeiError, InputError
from .paramspace import as_matrix, weighted_sum


@dataclass
class BiLevelConfig:
    eta1: float = 0.05               # inner-loop lr (alpha)
    eta2: float = 0.05               # outer-loop lr (beta)
    outer_steps: int = 1
    inner_batch_size: int = 32
    actual_alpha_max_epochs: int = 50
    actual_alpha_rel_tol: float = 1e-5
    actual_alpha_patience: int = 3

    def __post_init__(self):
        if self.eta1 < 0 or self.eta2 < 0:
            raise InputError("learning rates must be >= 0")
        if self.outer_steps < 1:
            raise InputError("outer_steps must be >= 1")


@dataclass
class InnerResult:
    """Outcome of a client's inner loop for one module part."""

    alpha_updated: np.ndarray   # alpha after the inner steps
    g0: np.ndarray              # grad w.r.t. the aggregated module, first step
    eta1: float
    steps: int

    @property
    def approximate(self) -> bool:
        # More than one inner step: the single-step Jacobian below is a
        # first-order approximation using the last alpha and the first g0.
        return self.steps > 1


def init_beta(assignment) -> np.ndarray:
    """Row-normalized cluster assignment: beta[c, j] = B[c, j] / |cluster c|."""
    assignment.validate()
    B = assignment.B
    return B / B.sum(axis=1, keepdims=True)


def cluster_modules_from_beta(beta: np.ndarray, mods: np.ndarray) -> np.ndarray:
    """theta_c = sum_j beta[c, j] * theta_j for each cluster; (K, dim) rows."""
    mods = as_matrix(mods)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 2 or beta.shape[1] != mods.shape[1]:
        raise InputError("beta columns must match module count")
    return np.stack([weighted_sum(mods, beta[c]) for c in range(beta.shape[0])])


def aggregate_inter(alpha: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """theta_tilde = sum_c alpha_c * theta_c over the (K, dim) cluster rows."""
    thetas = np.asarray(thetas, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if thetas.ndim != 2 or alpha.shape != (thetas.shape[0],):
        raise InputError("alpha length must match cluster-module count")
    return weighted_sum(thetas.T, alpha)


def uniform_alpha(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def _assemble(alphas: dict, thetas: dict) -> dict:
    return {p: aggregate_inter(alphas[p], thetas[p]) for p in alphas}


def inner_update_alpha(alphas: dict, thetas: dict, batches, grad_fn,
                       eta1: float) -> dict:
    """Inner-loop alpha updates for one client, one step per mini-batch.

    ``grad_fn(parts, batch)`` must return the per-part gradient of the task
    loss at the assembled module. Per step and part:
    alpha <- alpha - eta1 * Theta_K^T g, with the K cluster modules as the
    columns of Theta_K. Returns one InnerResult per part; ``g0`` is the
    gradient from the first mini-batch.
    """
    if not batches:
        raise InputError("inner loop needs at least one batch")
    alphas = {p: np.asarray(a, dtype=np.float64).copy() for p, a in alphas.items()}
    g0 = {}
    for step, batch in enumerate(batches):
        grads = grad_fn(_assemble(alphas, thetas), batch)
        for p in alphas:
            if not np.all(np.isfinite(grads[p])):
                raise DivergenceError(f"non-finite inner gradient for part {p!r}",
                                      step=step)
            if step == 0:
                g0[p] = np.asarray(grads[p], dtype=np.float64)
            alphas[p] = alphas[p] - eta1 * (thetas[p] @ grads[p])
    return {p: InnerResult(alpha_updated=alphas[p], g0=g0[p], eta1=eta1,
                           steps=len(batches))
            for p in alphas}


def client_outer_grad(inner: InnerResult, thetas: np.ndarray,
                      v: np.ndarray) -> np.ndarray:
    """Per-cluster gradients grad_{theta_c} L for one part, rank-1 shortcut.

    ``v`` is the task gradient w.r.t. the aggregated module at the updated
    alpha. With the Jacobian d(theta_tilde)/d(theta_c) =
    alpha_c I - eta1 theta_c g0^T, its transpose applied to v collapses to
    alpha_c v - eta1 g0 (theta_c . v).
    """
    if inner.g0 is None:
        raise FedkeiError("missing g0: inner loop was not run")
    thetas = np.asarray(thetas, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    k = thetas.shape[0]
    out = np.empty_like(thetas)
    for c in range(k):
        out[c] = inner.alpha_updated[c] * v - inner.eta1 * inner.g0 * (thetas[c] @ v)
    return out


def server_update_beta(beta: np.ndarray, mods: np.ndarray, client_grads,
                       eta2: float) -> np.ndarray:
    """One outer-loop step: beta_c -= eta2 * sum_i Theta_M^T grad_{theta_c} L_i.

    ``client_grads`` lists one (K, dim) array per client in ascending
    client id; the summation runs in that order so the result is
    independent of message arrival order.
    """
    beta = np.asarray(beta, dtype=np.float64)
    mods = as_matrix(mods)
    if not client_grads:
        raise InputError("no client gradients")
    new_beta = beta.copy()
    for c in range(beta.shape[0]):
        total = np.zeros(beta.shape[1])
        for grads in client_grads:
            total += mods.T @ grads[c]
        new_beta[c] = beta[c] - eta2 * total
    return new_beta


def learn_alpha_actual(thetas: dict, batch_epochs, loss_fn, grad_fn,
                       cfg: BiLevelConfig, full_batch) -> dict:
    """Actual learning of the personalized inter-cluster weights.

    Plain gradient descent on alpha alone from the uniform init, over the
    mini-batch epochs yielded by ``batch_epochs`` (an iterable of batch
    lists). Stops at ``actual_alpha_max_epochs`` or when the relative
    full-batch loss improvement stays below ``actual_alpha_rel_tol`` for
    ``actual_alpha_patience`` consecutive epochs.
    """
    alphas = {p: uniform_alpha(thetas[p].shape[0]) for p in thetas}
    prev_loss = loss_fn(_assemble(alphas, thetas), full_batch)
    stall = 0
    for epoch, batches in enumerate(batch_epochs):
        if epoch >= cfg.actual_alpha_max_epochs:
            break
        for batch in batches:
            grads = grad_fn(_assemble(alphas, thetas), batch)
            for p in alphas:
                alphas[p] = alphas[p] - cfg.eta1 * (thetas[p] @ grads[p])
        loss = loss_fn(_assemble(alphas, thetas), full_batch)
        if not np.isfinite(loss):
            raise DivergenceError("actual alpha learning diverged", step=epoch)
        if abs(prev_loss - loss) < cfg.actual_alpha_rel_tol * max(1.0, abs(prev_loss)):
            stall += 1
            if stall >= cfg.actual_alpha_patience:
                break
        else:
            stall = 0
        prev_loss = loss
    return alphas


def build_init(alpha_hat: np.ndarray, beta: np.ndarray,
               mods: np.ndarray) -> np.ndarray:
    """Final aggregated module for one part:
    sum_c alpha_hat_c * (sum_j beta[c, j] * theta_j)."""
    thetas = cluster_modules_from_beta(beta, mods)
    return aggregate_inter(alpha_hat, thetas)
