"""Evaluation metrics (AUC, LCA), Welch's t-test, and the variant runner
used by the ablation study.

AUC uses the rank (Mann-Whitney) form with midrank tie handling. The Welch
p-value is computed from the t-distribution via a regularized incomplete
beta evaluated with the standard continued fraction, accurate to ~1e-10.
"""

import math

import numpy as np

from .errors import InputError, UndefinedMetricError

VARIANTS = ("Rand", "FedAvgInit", "A", "B", "C", "FedKEI")


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties 0.5)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError("scores and labels must be 1-D of equal length")
    pos = labels == 1
    n_pos = int(np.sum(pos))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both a positive and a negative")
    ranks = _midranks(scores)
    u = np.sum(ranks[pos]) - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def lca(trace) -> float:
    """Learning Curve Area: arithmetic mean of per-epoch AUCs."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 1 or trace.size == 0:
        raise InputError("trace must be 1-D and nonempty")
    return float(np.mean(trace))


def _betacf(a: float, b: float, x: float) -> float:
    # Continued fraction for the incomplete beta (Lentz's method).
    max_iter = 300
    eps = 3e-14
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def _betainc_reg(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t with ``df`` degrees."""
    if df <= 0:
        raise InputError("degrees of freedom must be positive")
    x = df / (df + t * t)
    return _betainc_reg(df / 2.0, 0.5, x)


def welch_t(samples_a, samples_b):
    """Unequal-variance t statistic with Welch-Satterthwaite df; two-sided p."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InputError("each group needs at least two samples")
    va = float(np.var(a, ddof=1))
    vb = float(np.var(b, ddof=1))
    ma, mb = float(np.mean(a)), float(np.mean(b))
    if va == 0.0 and vb == 0.0:
        if ma == mb:
            return 0.0, 1.0
        return math.copysign(math.inf, ma - mb), 0.0
    sa, sb = va / a.size, vb / b.size
    t = (ma - mb) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    return t, t_sf_two_sided(t, df)


def significance_marker(p: float) -> str:
    """Superscript convention used in comparison tables."""
    if p < 0.001:
        return "‡"
    if p < 0.01:
        return "†"
    if p < 0.05:
        return "*"
    return ""


def run_variant(variant: str, config, seed: int):
    """Run one ablation variant on one seed; returns a RunReport.

    Rand       fresh random init per task
    FedAvgInit plain mean of all pooled modules
    A          learned alpha over per-client aggregates, no clustering
    B          A + clustering (alpha over cluster modules, beta at init)
    C          B + beta by direct joint gradient descent
    FedKEI     full bi-level scheme
    """
    from .federation import run_stream  # deferred: federation imports model

    if variant not in VARIANTS:
        raise InputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return run_stream(config, variant=variant, seed=seed)
