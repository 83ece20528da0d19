"""Ranking evaluation and reference scorers.

``idm`` is the intersection dissimilarity between two score vectors: the
average, over all depths ``j``, of the normalised symmetric difference of
their top-``j`` sets. The two baselines turn binary labels into scores
without the development model: an attribute-only logistic regression and
label propagation over the blended community network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError, ValidationError

__all__ = [
    "IdmReport",
    "idm",
    "top_order",
    "LogisticFit",
    "fit_logistic",
    "baseline_logistic",
    "baseline_lnp",
    "combined_network",
]


@dataclass(frozen=True)
class IdmReport:
    idm: float
    per_j: np.ndarray


def top_order(z):
    """Indices sorted by decreasing score; ties go to the smaller index."""
    z = np.asarray(z, dtype=np.float64)
    return np.lexsort((np.arange(z.size), -z))


def idm(z_est, z_true):
    """Intersection dissimilarity between two rankings.

    ``per_j[j-1] = |Top_j(z_est) ^ Top_j(z_true)| / (2j)`` and
    ``idm = sum(per_j) / (2n)``. Zero for identical rankings; larger means
    less similar. Only the orderings matter, so any strictly increasing
    transform of either input leaves the value unchanged.
    """
    z_est = np.asarray(z_est, dtype=np.float64).ravel()
    z_true = np.asarray(z_true, dtype=np.float64).ravel()
    if z_est.shape != z_true.shape:
        raise ValidationError(
            f"score vectors differ in length: {z_est.size} vs {z_true.size}",
            invariant="equal lengths",
        )
    n = z_est.size
    if n == 0:
        return IdmReport(0.0, np.zeros(0))
    u, v = top_order(z_est), top_order(z_true)
    # element enters the intersection at the depth where both lists hold it
    pos_u = np.empty(n, dtype=np.int64)
    pos_v = np.empty(n, dtype=np.int64)
    pos_u[u] = np.arange(n)
    pos_v[v] = np.arange(n)
    joined = np.maximum(pos_u, pos_v)
    common = np.cumsum(np.bincount(joined, minlength=n))
    depth = np.arange(1, n + 1)
    per_j = 2.0 * (depth - common) / (2.0 * depth)
    return IdmReport(float(per_j.sum() / (2.0 * n)), per_j)


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    intercept: float
    converged: bool
    iterations: int

    def decision(self, A):
        return np.asarray(A, dtype=np.float64) @ self.coef + self.intercept


def fit_logistic(A, x, ridge=1e-6, tol=1e-10, max_iter=200):
    """Attribute-only logistic regression by damped Newton ascent.

    A tiny ridge keeps separable data finite; ``converged`` is False when
    the iteration cap is hit before the gradient tolerance.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.shape[0],):
        raise ValidationError("labels and attributes disagree on n", invariant="dimension n")
    n, p = A.shape
    X = np.hstack([A, np.ones((n, 1))])
    penalty = np.full(p + 1, ridge * n)
    penalty[-1] = 0.0
    w = np.zeros(p + 1)

    def objective(w):
        t = X @ w
        return float(np.sum(x * t - np.logaddexp(0.0, t)) - 0.5 * np.sum(penalty * w * w))

    f = objective(w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        t = X @ w
        pi = 0.5 * (1.0 + np.tanh(0.5 * t))
        g = X.T @ (x - pi) - penalty * w
        if np.max(np.abs(g)) <= tol * max(1.0, n):
            converged = True
            break
        W = pi * (1.0 - pi)
        P = X.T @ (X * W[:, None]) + np.diag(penalty) + 1e-12 * np.eye(p + 1)
        d = np.linalg.solve(P, g)
        step = 1.0
        while step > 1e-12:
            w_new = w + step * d
            f_new = objective(w_new)
            if f_new >= f:
                break
            step *= 0.5
        else:
            break
        if f_new - f <= 1e-14 * max(1.0, abs(f)):
            w, f = w_new, f_new
            converged = True
            break
        w, f = w_new, f_new
    return LogisticFit(w[:p].copy(), float(w[p]), converged, it)


def baseline_logistic(A, x, **kwargs):
    """Score = linear predictor of an attribute-only logistic fit.

    Returns ``(scores, fit)``; ``fit.converged`` flags a non-converged fit.
    """
    fit = fit_logistic(A, x, **kwargs)
    return fit.decision(A), fit


def _row_normalize(M):
    M = sp.csr_matrix(M, dtype=np.float64)
    sums = np.asarray(M.sum(axis=1)).ravel()
    inv = np.divide(1.0, sums, out=np.zeros_like(sums), where=sums > 0)
    return sp.diags(inv) @ M


def combined_network(Y, S, weight=0.5):
    """``weight * rownorm(Y) + (1 - weight) * rownorm(S)``; empty rows stay zero."""
    return (weight * _row_normalize(Y) + (1.0 - weight) * _row_normalize(S)).tocsr()


def baseline_lnp(W, x, mix=0.9, tol=1e-8, max_iter=10_000):
    """Label propagation ``s <- mix W s + (1 - mix) x`` from ``s = x``.

    ``W`` should be row-stochastic (or sub-stochastic), e.g. from
    :func:`combined_network`.

    Raises
    ------
    ConvergenceError
        If the sup-norm update stays above ``tol`` for ``max_iter`` steps.
    """
    if not 0.0 <= mix <= 1.0:
        raise ValidationError(f"mix must be in [0, 1], got {mix}", invariant="mix in [0,1]")
    x = np.asarray(x, dtype=np.float64)
    prior = (1.0 - mix) * x
    s = x.copy()
    if mix == 0.0:
        return s
    for _ in range(max_iter):
        s_new = mix * (W @ s) + prior
        if np.max(np.abs(s_new - s)) <= tol:
            return s_new
        s = s_new
    raise ConvergenceError(f"label propagation not converged in {max_iter} iterations", last=s)
