"""Equilibrium development scores.

The score obeys ``z = lambda1 Y z + lambda2 S z + A beta + alpha + eps``.
When ``|lambda1| rho(Y) + |lambda2| rho(S) < 1`` the map is a contraction
(in the Euclidean norm, for symmetric ``Y`` and ``S``) so the equilibrium is
unique and the iteration converges to it from any start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, NumericalError, StabilityViolation

__all__ = [
    "ScoreResult",
    "StabilityReport",
    "stability_check",
    "solve_direct",
    "solve_fixed_point",
    "equilibrium_residual",
    "DENSE_LIMIT",
    "STABILITY_EPS",
]

STABILITY_EPS = 1e-6
DENSE_LIMIT = 2000


@dataclass(frozen=True)
class ScoreResult:
    """Equilibrium score with the error vector that produced it.

    ``residual`` is ``||z - lambda1 Y z - lambda2 S z - A beta - alpha - eps||_inf``;
    ``iterations`` is 0 for the direct solver.
    """

    z_star: np.ndarray
    epsilon: np.ndarray
    iterations: int
    residual: float


@dataclass(frozen=True)
class StabilityReport:
    passed: bool
    product: float
    margin: float

    def __bool__(self):
        return self.passed


def stability_check(lambda1, lambda2, rho_Y, rho_S):
    """Sufficient condition for a unique, globally attracting equilibrium.

    Passes iff ``|lambda1| rho_Y + |lambda2| rho_S < 1 - 1e-6``. ``margin`` is
    ``1 - product``.
    """
    if rho_Y < 0 or rho_S < 0:
        raise ValueError("spectral radii must be nonnegative")
    product = abs(lambda1) * rho_Y + abs(lambda2) * rho_S
    return StabilityReport(product < 1.0 - STABILITY_EPS, product, 1.0 - product)


def _require_stable(lambda1, lambda2, Y, S, rho_Y, rho_S):
    from .graph import spectral_radius

    if rho_Y is None:
        rho_Y = spectral_radius(Y) if lambda1 != 0 else 0.0
    if rho_S is None:
        rho_S = spectral_radius(S) if lambda2 != 0 else 0.0
    report = stability_check(lambda1, lambda2, rho_Y, rho_S)
    if not report:
        raise StabilityViolation(
            f"network weights too large: |lambda1| rho(Y) + |lambda2| rho(S) = "
            f"{report.product:.6g} >= 1",
            product=report.product,
        )
    return report


def _operator(Y, S, lambda1, lambda2):
    def apply(z):
        out = np.zeros_like(z)
        if lambda1 != 0:
            out += lambda1 * (Y @ z)
        if lambda2 != 0:
            out += lambda2 * (S @ z)
        return out

    return apply


def _exogenous(A, beta, alpha, epsilon):
    A = np.asarray(A, dtype=np.float64)
    return A @ np.asarray(beta, dtype=np.float64) + alpha + np.asarray(epsilon, dtype=np.float64)


def equilibrium_residual(z, Y, S, A, lambda1, lambda2, beta, alpha, epsilon):
    """``||z - T(z)||_inf`` for the equilibrium map ``T``."""
    spill = _operator(Y, S, lambda1, lambda2)
    return float(np.max(np.abs(z - spill(z) - _exogenous(A, beta, alpha, epsilon)), initial=0.0))


def _unpack(params):
    return params.lambda1, params.lambda2, params.beta, params.alpha


def solve_direct(Y, S, A, params, epsilon, rho_Y=None, rho_S=None):
    """Solve ``(I - lambda1 Y - lambda2 S) z = A beta + alpha + eps``.

    Dense LU for ``n <= 2000``; conjugate gradients otherwise (the system
    matrix is symmetric positive definite under the stability condition).

    Parameters
    ----------
    Y, S : sparse (n, n)
    A : ndarray (n, p)
    params : object with ``lambda1, lambda2, alpha, beta``
    epsilon : ndarray (n,)
    rho_Y, rho_S : float, optional
        Cached spectral radii; computed when omitted.

    Raises
    ------
    StabilityViolation
    NumericalError
        When the solver cannot reach the residual tolerance.
    """
    lambda1, lambda2, beta, alpha = _unpack(params)
    _require_stable(lambda1, lambda2, Y, S, rho_Y, rho_S)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    rhs = _exogenous(A, beta, alpha, epsilon)
    n = rhs.shape[0]
    if lambda1 == 0 and lambda2 == 0:
        z = rhs.copy()
    elif n <= DENSE_LIMIT:
        K = np.eye(n)
        if lambda1 != 0:
            K -= lambda1 * _dense(Y)
        if lambda2 != 0:
            K -= lambda2 * _dense(S)
        z = la.solve(K, rhs, assume_a="sym")
    else:
        K = sp.identity(n, format="csr")
        if lambda1 != 0:
            K = K - lambda1 * Y
        if lambda2 != 0:
            K = K - lambda2 * S
        K = K.tocsr()
        scale = np.linalg.norm(rhs)
        if scale == 0:
            z = np.zeros(n)
        else:
            z, info = spla.cg(K, rhs, rtol=1e-13, atol=0.0, maxiter=10 * n)
            if info < 0:
                raise NumericalError("conjugate gradient breakdown", last=z)
            # a couple of refinement sweeps absorb CG rounding drift
            for _ in range(3):
                r = rhs - K @ z
                if np.max(np.abs(r)) <= 1e-10 * (1 + np.max(np.abs(z))):
                    break
                dz, _ = spla.cg(K, r, rtol=1e-13, atol=0.0, maxiter=10 * n)
                z = z + dz
    residual = equilibrium_residual(z, Y, S, A, lambda1, lambda2, beta, alpha, epsilon)
    if not residual <= 1e-8 * (1 + np.max(np.abs(z))):
        raise NumericalError(f"direct solve residual {residual:.3g} above tolerance", last=z)
    return ScoreResult(z, epsilon.copy(), 0, residual)


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=np.float64)


def solve_fixed_point(
    Y, S, A, params, epsilon, tol=1e-10, max_iter=100_000, z0=None, rho_Y=None, rho_S=None,
    callback=None,
):
    """Iterate ``z <- lambda1 Y z + lambda2 S z + A beta + alpha + eps``.

    Starts from ``z0`` (zeros by default) and returns the first iterate
    ``z_k`` whose update moves it by at most ``tol`` in the sup norm;
    ``iterations`` is that ``k``. ``callback(k, z_k)`` is invoked for every
    iterate including ``z_0``.

    Raises
    ------
    StabilityViolation
    ConvergenceError
        After ``max_iter`` updates; ``.last`` holds ``(z_k, z_{k+1}, gap)``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    lambda1, lambda2, beta, alpha = _unpack(params)
    _require_stable(lambda1, lambda2, Y, S, rho_Y, rho_S)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    c = _exogenous(A, beta, alpha, epsilon)
    spill = _operator(Y, S, lambda1, lambda2)
    z = np.zeros_like(c) if z0 is None else np.array(z0, dtype=np.float64)
    for k in range(max_iter + 1):
        if callback is not None:
            callback(k, z)
        z_next = spill(z) + c
        gap = float(np.max(np.abs(z_next - z), initial=0.0))
        if gap <= tol:
            return ScoreResult(z, epsilon.copy(), k, gap)
        if k == max_iter:
            break
        z = z_next
    raise ConvergenceError(
        f"fixed-point iteration not converged after {max_iter} iterations (gap {gap:.3g})",
        last=(z, z_next, gap),
    )
