"""MAP estimation of the development model from binary labels.

The model links labels to an equilibrium score::

    z = (I - lambda1 Y - lambda2 S(xi))^-1 (A beta + alpha + eps)
    P(x_i = 1 | z_i) = sigmoid(a z_i + b)
    eps_i ~ N(0, sigma_eps^2)

and the log posterior is the label log-likelihood plus the Gaussian error
log-density. :func:`fit` maximises it jointly over the parameters and the
latent errors with a damped Newton method.

The optimiser works in ``(theta, z)`` coordinates rather than
``(theta, eps)``: ``eps = K z - A beta - alpha`` with ``K = I - lambda1 Y -
lambda2 S`` is a bijection for every stable ``theta``, so the objective takes
the same values, but it becomes explicit (no linear solve per evaluation)
and its Hessian in ``z`` is sparse.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .equilibrium import STABILITY_EPS, solve_direct, stability_check
from .errors import CapabilityError, ConstraintError, EstimationError, StabilityViolation, ValidationError
from .evaluation import fit_logistic
from .graph import check_simplex, derive_networks, spectral_radius

__all__ = [
    "ModelParams",
    "FitConfig",
    "FitResult",
    "Gradient",
    "LabelLikelihood",
    "label_likelihood",
    "log_posterior",
    "gradient",
    "fit",
    "softmax_pinned",
    "logits_pinned",
]

log = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def softmax_pinned(logits):
    """Simplex point from ``q - 1`` free logits (the last logit is 0)."""
    full = np.append(np.asarray(logits, dtype=np.float64), 0.0)
    full -= full.max()
    # floor keeps extreme trial logits strictly inside the simplex
    e = np.maximum(np.exp(full), 1e-300)
    return e / e.sum()


def logits_pinned(xi):
    """Inverse of :func:`softmax_pinned`."""
    xi = np.asarray(xi, dtype=np.float64)
    return np.log(xi[:-1]) - np.log(xi[-1])


def _softmax_jacobian(xi):
    # d xi_k / d logit_j for the q - 1 free logits
    J = np.diag(xi) - np.outer(xi, xi)
    return J[:, :-1]


def _softmax_curvature(xi, g):
    """``sum_k g_k d^2 xi_k / d logit^2`` over the ``q - 1`` free logits."""
    q = xi.size
    qm = q - 1
    base = np.diag(xi[:qm]) - np.outer(xi[:qm], xi[:qm])
    out = np.zeros((qm, qm))
    for k in range(q):
        u_k = ((np.arange(q) == k).astype(float) - xi)[:qm]
        out += g[k] * xi[k] * (np.outer(u_k, u_k) - base)
    return out


@dataclass(frozen=True)
class ModelParams:
    """Development-model parameters.

    ``lambda1`` / ``lambda2`` weight diffusion over the association and social
    networks, ``alpha`` and ``beta`` are the intercept and attribute
    coefficients, ``a`` and ``b`` the logistic link, ``sigma_eps`` the error
    scale and ``xi`` the relation weights on the simplex.
    """

    lambda1: float
    lambda2: float
    alpha: float
    beta: np.ndarray
    a: float = 1.0
    b: float = 0.0
    sigma_eps: float = 1.0
    xi: np.ndarray = None

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64, copy=True).ravel()
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        for name in ("lambda1", "lambda2", "alpha", "a", "b", "sigma_eps"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.xi is not None:
            xi = np.array(check_simplex(self.xi), dtype=np.float64)
            xi.setflags(write=False)
            object.__setattr__(self, "xi", xi)
        if not self.sigma_eps > 0:
            raise ConstraintError("sigma_eps must be positive", invariant="sigma_eps > 0")
        if self.a < 0:
            raise ConstraintError("logistic slope a must be nonnegative", invariant="a >= 0")

    def replace(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        out = {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "alpha": self.alpha,
            "a": self.a,
            "b": self.b,
            "sigma_eps": self.sigma_eps,
        }
        for k, v in enumerate(self.beta):
            out[f"beta_{k + 1}"] = float(v)
        if self.xi is not None:
            for k, v in enumerate(self.xi):
                out[f"xi_{k + 1}"] = float(v)
        return out

    @classmethod
    def from_dict(cls, d):
        beta = [float(d[k]) for k in sorted((k for k in d if k.startswith("beta_")),
                                            key=lambda k: int(k.split("_")[1]))]
        xi_keys = sorted((k for k in d if k.startswith("xi_")), key=lambda k: int(k.split("_")[1]))
        xi = [float(d[k]) for k in xi_keys] or None
        return cls(
            lambda1=float(d["lambda1"]),
            lambda2=float(d["lambda2"]),
            alpha=float(d["alpha"]),
            beta=np.array(beta),
            a=float(d.get("a", 1.0)),
            b=float(d.get("b", 0.0)),
            sigma_eps=float(d.get("sigma_eps", 1.0)),
            xi=xi,
        )


@dataclass(frozen=True)
class FitConfig:
    """Estimation settings.

    ``fix_lambda2`` drops the social-network term (basic model),
    ``fix_xi`` freezes the relation weights, ``fix_a`` keeps the logistic
    slope at its initial value. With ``a`` free the joint MAP is unbounded
    (``a -> inf`` lets vanishing errors fit every label), so it is fixed by
    default.

    ``method="laplace"`` (default) maximises the Laplace approximation of
    the marginal posterior of the parameters, with the errors integrated out
    around their conditional mode. ``method="map"`` maximises jointly over
    parameters and errors; that estimate shrinks the network weights towards
    zero.

    ``xi_concentration`` is the symmetric Dirichlet prior on the relation
    weights (1 means flat); values above 1 keep them off the simplex boundary.

    ``log_jacobian`` (joint MAP only) adds ``log det(I - lambda1 Y - lambda2 S)``
    to the objective, i.e. maximises the joint density of the scores rather
    than of the errors. Without it the network weights act as free
    amplifiers of the errors and the optimum sits on the stability boundary.
    """

    sigma_eps: float = 1.0
    max_iter: int = 500
    grad_tol: float = 1e-6
    gain_tol: float = 1e-10
    seed: int = 0
    fix_lambda2: bool = False
    fix_xi: bool = False
    fix_a: bool = True
    init_lambda: float = 0.05
    a_init: float = 1.0
    log_jacobian: bool = True
    method: str = "laplace"
    xi_concentration: float = 2.0

    def __post_init__(self):
        if not self.sigma_eps > 0:
            raise ValidationError("sigma_eps must be positive", invariant="sigma_eps > 0")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1", invariant="max_iter >= 1")
        if self.grad_tol < 0 or self.gain_tol < 0:
            raise ValidationError("tolerances must be nonnegative", invariant="tolerances >= 0")
        if self.method not in ("laplace", "map"):
            raise ValidationError(f"unknown fit method {self.method!r}", invariant="method")
        if not self.xi_concentration >= 1.0:
            raise ValidationError("xi_concentration must be >= 1", invariant="xi_concentration >= 1")
        if not self.a_init > 0:
            raise ValidationError("a_init must be positive", invariant="a > 0")


@dataclass
class FitResult:
    params: ModelParams
    epsilon_hat: np.ndarray
    z_star: np.ndarray
    log_posterior: float
    converged: bool
    trace: list = field(default_factory=list)
    iterations: int = 0
    grad_norm: float = np.nan


@dataclass(frozen=True)
class LabelLikelihood:
    prob: np.ndarray
    loglik: float


def label_likelihood(z_star, x, a, b):
    """Logistic label model.

    Returns ``P(x_i = 1 | z_i) = 1 / (1 + exp(-(a z_i + b)))`` for every
    community and the total log-likelihood of ``x``, evaluated in a form
    that stays finite for ``|a z + b|`` up to several hundred.
    """
    t = a * np.asarray(z_star, dtype=np.float64) + b
    x = np.asarray(x, dtype=np.float64)
    prob = np.exp(-np.logaddexp(0.0, -t))
    loglik = float(np.sum(x * t - np.logaddexp(0.0, t)))
    return LabelLikelihood(prob, loglik)


def _gauss_logpdf_sum(eps, sigma):
    eps = np.asarray(eps, dtype=np.float64)
    return float(-np.sum(eps * eps) / (2.0 * sigma * sigma) - eps.size * (_LOG_SQRT_2PI + np.log(sigma)))


def _networks_for(params, derived):
    if params.xi is not None and derived.q > 0 and not np.array_equal(params.xi, derived.xi):
        derived = derived.with_xi(params.xi)
    return derived


def log_posterior(params, epsilon, graph, derived=None):
    """Label log-likelihood at the equilibrium score plus the error log-density."""
    if graph.labels is None:
        raise ValidationError("log posterior needs labels", invariant="labels present")
    if derived is None:
        derived = derive_networks(graph, params.xi)
    derived = _networks_for(params, derived)
    res = solve_direct(
        derived.association, derived.social, graph.attributes, params, epsilon,
        rho_Y=derived.rho_Y, rho_S=derived.rho_S,
    )
    ll = label_likelihood(res.z_star, graph.labels, params.a, params.b).loglik
    return ll + _gauss_logpdf_sum(epsilon, params.sigma_eps)


@dataclass(frozen=True)
class Gradient:
    """Gradient of :func:`log_posterior`; ``xi_logits`` has ``q - 1`` entries."""

    lambda1: float
    lambda2: float
    alpha: float
    beta: np.ndarray
    a: float
    b: float
    xi_logits: np.ndarray
    epsilon: np.ndarray

    def vector(self):
        return np.concatenate([
            [self.lambda1, self.lambda2, self.alpha], self.beta, [self.a, self.b],
            self.xi_logits, self.epsilon,
        ])


def _system_matrix(Y, S, lambda1, lambda2):
    n = Y.shape[0]
    K = sp.identity(n, format="csr")
    if lambda1 != 0:
        K = K - lambda1 * Y
    if lambda2 != 0:
        K = K - lambda2 * S
    return sp.csc_matrix(K)


def gradient(params, epsilon, graph, derived=None):
    """Analytic gradient of :func:`log_posterior`.

    With ``K = I - lambda1 Y - lambda2 S`` and ``g = a (x - pi)`` the score
    sensitivity, the adjoint ``v = K^-1 g`` gives every coordinate:
    ``d/d eps = v - eps / sigma^2``, ``d/d beta = A^T v``,
    ``d/d lambda1 = v . Y z`` and so on.
    """
    if graph.labels is None:
        raise ValidationError("gradient needs labels", invariant="labels present")
    if derived is None:
        derived = derive_networks(graph, params.xi)
    derived = _networks_for(params, derived)
    Y, S, A, x = derived.association, derived.social, graph.attributes, graph.labels
    eps = np.asarray(epsilon, dtype=np.float64)
    z = solve_direct(Y, S, A, params, eps, rho_Y=derived.rho_Y, rho_S=derived.rho_S).z_star
    t = params.a * z + params.b
    pi = np.exp(-np.logaddexp(0.0, -t))
    resid = x - pi
    g_z = params.a * resid
    K = _system_matrix(Y, S, params.lambda1, params.lambda2)
    v = spla.splu(K).solve(g_z) if K.shape[0] > 1 else g_z / K.toarray()[0, 0]
    xi = derived.xi
    g_xi = np.array([params.lambda2 * float(v @ (Sk @ z)) for Sk in derived.slices])
    g_logits = _softmax_jacobian(xi).T @ g_xi
    return Gradient(
        lambda1=float(v @ (Y @ z)),
        lambda2=float(v @ (S @ z)),
        alpha=float(v.sum()),
        beta=A.T @ v,
        a=float(resid @ z),
        b=float(resid.sum()),
        xi_logits=g_logits,
        epsilon=v - eps / params.sigma_eps ** 2,
    )


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

LOGDET_DENSE_LIMIT = 3000
PROJECT_MARGIN = 1e-4


class _SPDFactor:
    """Factorisation of a sparse symmetric positive definite matrix.

    Dense Cholesky up to ``LOGDET_DENSE_LIMIT`` rows, sparse LU with a
    symmetric fill-reducing ordering beyond.
    """

    def __init__(self, M):
        self.n = M.shape[0]
        self.dense = self.n <= LOGDET_DENSE_LIMIT
        if self.dense:
            self.c = la.cho_factor(M.toarray() if sp.issparse(M) else M, lower=True)
        else:
            self.lu = spla.splu(sp.csc_matrix(M), permc_spec="MMD_AT_PLUS_A")

    def solve(self, b):
        if self.dense:
            return la.cho_solve(self.c, b)
        return self.lu.solve(np.asfortranarray(b))

    def logdet(self):
        if self.dense:
            return 2.0 * float(np.sum(np.log(np.diag(self.c[0]))))
        return float(np.sum(np.log(np.abs(self.lu.U.diagonal()))))


def _logdet(K):
    """``log det K`` for symmetric positive definite ``K``."""
    return _SPDFactor(K).logdet()


def _logdet_traces(K, mats, block=256):
    """``t_a = tr(K^-1 D_a)`` and ``T_ab = tr(K^-1 D_a K^-1 D_b)``.

    Dense inverse for moderate ``n``; blocked sparse solves otherwise.
    """
    n = K.shape[0]
    r = len(mats)
    t = np.zeros(r)
    T = np.zeros((r, r))
    if n <= LOGDET_DENSE_LIMIT:
        c = la.cho_factor(K.toarray(), lower=True)
        G = la.cho_solve(c, np.eye(n))
        P = [D @ G for D in mats]
        for a in range(r):
            t[a] = np.trace(P[a])
            for b in range(a, r):
                T[a, b] = T[b, a] = float(np.sum(P[a] * P[b].T))
        return t, T
    lu = _SPDFactor(K)
    for start in range(0, n, block):
        cols = np.arange(start, min(n, start + block))
        E = np.zeros((n, cols.size))
        E[cols, np.arange(cols.size)] = 1.0
        X = lu.solve(E)
        DX = [D @ X for D in mats]
        Q = [lu.solve(np.asfortranarray((D[:, cols]).toarray())) for D in mats]
        for a in range(r):
            t[a] += float(np.sum(DX[a][cols, np.arange(cols.size)]))
            for b in range(r):
                T[a, b] += float(np.sum(DX[a] * Q[b]))
    return t, 0.5 * (T + T.T)


class _Problem:
    """Objective, gradient and curvature in ``(theta, z)`` coordinates.

    ``theta`` packs the free parameters in the order given by ``names``;
    ``z`` follows. Curvature is the negated exact Hessian.
    """

    def __init__(self, graph, derived, config, template):
        self.A = np.asarray(graph.attributes, dtype=np.float64)
        self.x = np.asarray(graph.labels, dtype=np.float64)
        self.Y = derived.association
        self.slices = list(derived.slices)
        self.rho_Y = derived.rho_Y
        self.rho_slices = [spectral_radius(Sk) for Sk in self.slices]
        self.n, self.p = self.A.shape
        self.q = len(self.slices)
        self.sigma = config.sigma_eps
        self.template = template
        self.use_S = not config.fix_lambda2
        self.free_xi = self.use_S and not config.fix_xi and self.q > 1
        self.free_a = not config.fix_a
        names = [("lambda1", 1)]
        if self.use_S:
            names.append(("lambda2", 1))
        names += [("alpha", 1), ("beta", self.p)]
        if self.free_a:
            names.append(("a", 1))
        names.append(("b", 1))
        if self.free_xi:
            names.append(("eta", self.q - 1))
        self.slots = {}
        off = 0
        for name, size in names:
            self.slots[name] = slice(off, off + size)
            off += size
        self.k = off
        self._rho_cache = {}
        # the Laplace marginal always carries the Jacobian of eps -> z
        self.jacobian = config.log_jacobian or config.method == "laplace"
        self.xi_conc = config.xi_concentration

    # -- packing -----------------------------------------------------------
    def pack(self, params, z):
        th = np.zeros(self.k)
        th[self.slots["lambda1"]] = params.lambda1
        if self.use_S:
            th[self.slots["lambda2"]] = params.lambda2
        th[self.slots["alpha"]] = params.alpha
        th[self.slots["beta"]] = params.beta
        if self.free_a:
            th[self.slots["a"]] = np.sqrt(params.a)
        th[self.slots["b"]] = params.b
        if self.free_xi:
            th[self.slots["eta"]] = logits_pinned(params.xi)
        return np.concatenate([th, z])

    def unpack(self, u):
        th, z = u[: self.k], u[self.k:]
        t = self.template
        xi = softmax_pinned(th[self.slots["eta"]]) if self.free_xi else t.xi
        params = ModelParams(
            lambda1=th[self.slots["lambda1"]][0],
            lambda2=th[self.slots["lambda2"]][0] if self.use_S else 0.0,
            alpha=th[self.slots["alpha"]][0],
            beta=th[self.slots["beta"]],
            a=th[self.slots["a"]][0] ** 2 if self.free_a else t.a,
            b=th[self.slots["b"]][0],
            sigma_eps=self.sigma,
            xi=xi,
        )
        return params, z

    # -- pieces --------------------------------------------------------------
    def social(self, xi):
        S = self.slices[0] * xi[0]
        for Sk, w in zip(self.slices[1:], xi[1:]):
            S = S + Sk * w
        return S.tocsr()

    def rho_S(self, xi):
        key = tuple(np.round(xi, 15))
        if key not in self._rho_cache:
            if len(self._rho_cache) > 64:
                self._rho_cache.clear()
            self._rho_cache[key] = spectral_radius(self.social(xi))
        return self._rho_cache[key]

    def stable(self, params):
        l1, l2 = abs(params.lambda1), abs(params.lambda2)
        bound = l1 * self.rho_Y + l2 * float(np.dot(params.xi, self.rho_slices))
        if bound < 1.0 - STABILITY_EPS:
            return True
        if l2 == 0:
            return False
        return bool(stability_check(l1, l2, self.rho_Y, self.rho_S(params.xi)))

    def project(self, th):
        """Shrink the diffusion weights of packed ``th`` into the stability
        region (``|lambda1| rho(Y) + |lambda2| rho(S) = 1 - PROJECT_MARGIN``)."""
        params, _ = self.unpack(np.concatenate([th, np.zeros(self.n)]))
        rho_S = self.rho_S(params.xi) if self.use_S else 0.0
        bound = abs(params.lambda1) * self.rho_Y + abs(params.lambda2) * rho_S
        if bound < 1.0 - PROJECT_MARGIN:
            return th
        th = th.copy()
        c = (1.0 - PROJECT_MARGIN) / bound
        th[self.slots["lambda1"]] *= c
        if self.use_S:
            th[self.slots["lambda2"]] *= c
        return th

    def value(self, u):
        params, z = self.unpack(u)
        S = self.social(params.xi) if self.use_S else None
        r = z - params.lambda1 * (self.Y @ z) - self.A @ params.beta - params.alpha
        if self.use_S:
            r = r - params.lambda2 * (S @ z)
        t = params.a * z + params.b
        ll = float(np.sum(self.x * t - np.logaddexp(0.0, t)))
        out = ll + _gauss_logpdf_sum(r, self.sigma) + self.xi_prior(params.xi)
        if self.jacobian:
            out += _logdet(self.system(params, S))
        return out

    def xi_prior(self, xi):
        if not self.free_xi:
            return 0.0
        return (self.xi_conc - 1.0) * float(np.sum(np.log(xi)))

    def system(self, params, S=None):
        K = sp.identity(self.n, format="csr") - params.lambda1 * self.Y
        if self.use_S:
            K = K - params.lambda2 * (self.social(params.xi) if S is None else S)
        return K.tocsr()

    def _add_logdet(self, params, K, grad, Ptt):
        """Value of ``log det K`` and its exact derivatives folded into the
        theta gradient and (negated) Hessian."""
        sl = self.slots
        mats = [self.Y] + (self.slices if self.use_S else [])
        t, T = _logdet_traces(K, mats)
        l1 = sl["lambda1"].start
        grad[l1] -= t[0]
        Ptt[l1, l1] += T[0, 0]
        if self.use_S:
            xi, l2 = params.xi, params.lambda2
            tk, TYk, Tkl = t[1:], T[0, 1:], T[1:, 1:]
            j2 = sl["lambda2"].start
            grad[j2] -= float(xi @ tk)
            Ptt[l1, j2] += float(xi @ TYk)
            Ptt[j2, l1] += float(xi @ TYk)
            Ptt[j2, j2] += float(xi @ Tkl @ xi)
            if self.free_xi:
                e = sl["eta"]
                Jx = _softmax_jacobian(xi)
                g_xi = -l2 * tk
                grad[e] += Jx.T @ g_xi
                c1 = (l2 * TYk) @ Jx
                c2 = (tk + l2 * (Tkl @ xi)) @ Jx
                Ptt[l1, e] += c1
                Ptt[e, l1] += c1
                Ptt[j2, e] += c2
                Ptt[e, j2] += c2
                Ptt[e, e] += Jx.T @ (l2 * l2 * Tkl) @ Jx - _softmax_curvature(xi, g_xi)

    def full(self, u):
        """Value, gradient and curvature pieces at ``u``."""
        params, z = self.unpack(u)
        s2 = self.sigma ** 2
        Y, A, x = self.Y, self.A, self.x
        S = self.social(params.xi) if self.use_S else None
        l1, l2, a = params.lambda1, params.lambda2, params.a
        Yz = Y @ z
        r = z - l1 * Yz - A @ params.beta - params.alpha
        if self.use_S:
            Sz = S @ z
            r = r - l2 * Sz
        t = a * z + params.b
        pi = np.exp(-np.logaddexp(0.0, -t))
        W = pi * (1.0 - pi)
        res = x - pi
        value = float(np.sum(x * t - np.logaddexp(0.0, t))) + _gauss_logpdf_sum(r, self.sigma)

        # K r with K = I - l1 Y - l2 S (symmetric)
        Yr = Y @ r
        Kr = r - l1 * Yr
        if self.use_S:
            Sr = S @ r
            Kr = Kr - l2 * Sr

        n, k = self.n, self.k
        sl = self.slots
        grad = np.zeros(k + n)
        grad[k:] = a * res - Kr / s2

        # Jacobian of r wrt theta (n x k) and second-order cross terms
        Jt = np.zeros((n, k))
        Czt = np.zeros((n, k))
        Ctt = np.zeros((k, k))
        Jt[:, sl["lambda1"]] = -Yz[:, None]
        Czt[:, sl["lambda1"]] = -Yr[:, None]
        if self.use_S:
            Jt[:, sl["lambda2"]] = -Sz[:, None]
            Czt[:, sl["lambda2"]] = -Sr[:, None]
        Jt[:, sl["alpha"]] = -1.0
        Jt[:, sl["beta"]] = -A
        if self.free_xi:
            xi = params.xi
            Jx = _softmax_jacobian(xi)
            Skz = np.column_stack([Sk @ z for Sk in self.slices])
            Skr = np.column_stack([Sk @ r for Sk in self.slices])
            h = Skz.T @ r
            Jt[:, sl["eta"]] = -l2 * (Skz @ Jx)
            Czt[:, sl["eta"]] = -l2 * (Skr @ Jx)
            Ctt[sl["lambda2"], sl["eta"]] = -(h @ Jx)
            Ctt[sl["eta"], sl["lambda2"]] = -(h @ Jx)[:, None]
            Ctt[sl["eta"], sl["eta"]] += -l2 * _softmax_curvature(xi, h)
        grad[:k] = -(Jt.T @ r) / s2
        Ptt = (Jt.T @ Jt + Ctt) / s2
        K = sp.identity(n, format="csr") - l1 * Y
        if self.use_S:
            K = K - l2 * S
        K = K.tocsr()
        Pzt = (K @ Jt + Czt) / s2
        Pzz = (K @ K) / s2 + sp.diags(a * a * W)

        # logistic link
        bs = sl["b"]
        grad[bs] = res.sum()
        Ptt[bs, bs] += W.sum()
        Pzt[:, bs] += (a * W)[:, None]
        if self.free_a:
            ra = sl["a"]
            c = np.sqrt(a)  # a = c^2
            dfa = float(res @ z)
            grad[ra] = 2.0 * c * dfa
            # curvature in a, then chain through a = c^2
            Paa = float(W @ (z * z))
            Pab = float(W @ z)
            Paz = a * W * z - res
            Ptt[ra, ra] += 4.0 * c * c * Paa - 2.0 * dfa
            Ptt[ra, bs] += 2.0 * c * Pab
            Ptt[bs, ra] += 2.0 * c * Pab
            Pzt[:, ra] += (2.0 * c * Paz)[:, None]
        if self.free_xi and self.xi_conc != 1.0:
            e, xi, qm = sl["eta"], params.xi, self.q - 1
            c = self.xi_conc - 1.0
            value += c * float(np.sum(np.log(xi)))
            grad[e] += c * (1.0 - self.q * xi[:qm])
            Ptt[e, e] += c * self.q * (np.diag(xi[:qm]) - np.outer(xi[:qm], xi[:qm]))
        if self.jacobian:
            value += _logdet(K)
            self._add_logdet(params, K, grad, Ptt)
        return value, grad, Ptt, Pzt, Pzz.tocsc()


def _newton_step(Ptt, Pzt, Pzz, grad, k, mu):
    """Solve ``(P + mu I) d = grad`` by a Schur complement on the z block.

    Returns ``None`` when the damped curvature is not positive definite.
    """
    n = Pzz.shape[0]
    Pzz_mu = (Pzz + mu * sp.identity(n, format="csc")).tocsc()
    try:
        lu = _SPDFactor(Pzz_mu)
    except (RuntimeError, la.LinAlgError):
        return None
    g_t, g_z = grad[:k], grad[k:]
    X = lu.solve(np.asfortranarray(Pzt)) if k else np.zeros((n, 0))
    y = lu.solve(g_z)
    schur = Ptt + mu * np.eye(k) - Pzt.T @ X
    schur = 0.5 * (schur + schur.T)
    try:
        c = la.cho_factor(schur)
    except la.LinAlgError:
        return None
    d_t = la.cho_solve(c, g_t - Pzt.T @ y)
    d_z = y - X @ d_t
    if not np.all(np.isfinite(d_t)) or not np.all(np.isfinite(d_z)):
        return None
    return np.concatenate([d_t, d_z])


def _initial_params(graph, derived, config, rho_S_uniform):
    q = derived.q
    xi = np.full(q, 1.0 / q)
    logit = fit_logistic(graph.attributes, graph.labels)
    a = config.a_init
    lam1 = config.init_lambda
    lam2 = 0.0 if config.fix_lambda2 else config.init_lambda
    total = abs(lam1) * derived.rho_Y + abs(lam2) * rho_S_uniform
    if total >= 0.5:
        shrink = 0.5 / total
        lam1 *= shrink
        lam2 *= shrink
    return ModelParams(
        lambda1=lam1, lambda2=lam2, alpha=logit.intercept / a, beta=logit.coef / a,
        a=a, b=0.0, sigma_eps=config.sigma_eps, xi=xi,
    )


def _hinv_traces(H, KD, block=256):
    """``diag(H^-1)`` and ``tr(H^-1 M)`` for each ``M`` in ``KD``.

    Also returns the factorisation of ``H``.
    """
    n = H.shape[0]
    fac = _SPDFactor(H)
    if fac.dense:
        Hinv = fac.solve(np.eye(n))
        fac.inverse = Hinv
        # tr(H^-1 M) = sum(H^-1 * M^T)
        traces = np.array([float(np.sum(M.T.multiply(Hinv))) for M in KD])
        return np.diag(Hinv).copy(), traces, fac
    diag = np.zeros(n)
    traces = np.zeros(len(KD))
    KD = [sp.csc_matrix(M) for M in KD]
    for start in range(0, n, block):
        cols = np.arange(start, min(n, start + block))
        E = np.zeros((n, cols.size))
        E[cols, np.arange(cols.size)] = 1.0
        X = fac.solve(E)
        diag[cols] = X[cols, np.arange(cols.size)]
        for r, M in enumerate(KD):
            traces[r] += float(np.sum(X * M[:, cols].toarray()))
    return diag, traces, fac


class _Laplace:
    """Laplace-approximate log marginal posterior ``psi(theta)``.

    ``psi = f(theta, z_hat) - 1/2 log det H`` where ``f`` is the joint log
    density in ``(theta, z)`` coordinates (including ``log det K``),
    ``z_hat`` its conditional mode and ``H = K^2 / sigma^2 + a^2 diag(W)``
    the negated ``z`` Hessian there.

    An optional selection term ``g`` (the formation log-likelihood of ``Y``)
    is evaluated at the fundamentals ``v = K z = A beta + alpha + eps``,
    the part of the score that does not itself depend on ``Y``. It adds
    ``g(v)`` to ``f`` and ``K G K`` to ``H``, with ``G`` the expected
    curvature of ``g``.
    """

    def __init__(self, prob, selection=None):
        self.prob = prob
        self.sel = selection

    def _dK(self, params, y):
        # columns (dK / dtheta) y; nonzero in the diffusion slots only
        prob = self.prob
        sl = prob.slots
        J = np.zeros((prob.n, prob.k))
        J[:, sl["lambda1"]] = -(prob.Y @ y)[:, None]
        if prob.use_S:
            J[:, sl["lambda2"]] = -(prob.social(params.xi) @ y)[:, None]
            if prob.free_xi:
                Sky = np.column_stack([Sk @ y for Sk in prob.slices])
                J[:, sl["eta"]] = -params.lambda2 * (Sky @ _softmax_jacobian(params.xi))
        return J

    def mode(self, params, z0, tol=1e-10, max_iter=100):
        """Conditional mode of ``z``: Newton (concave case) or Levenberg-damped
        Newton (with a selection term)."""
        prob = self.prob
        K = prob.system(params)
        m = prob.A @ params.beta + params.alpha
        a, b, s2 = params.a, params.b, prob.sigma ** 2
        KK = (K @ K) / s2
        z = np.array(z0, dtype=np.float64)
        sel = self.sel

        def obj(z):
            t = a * z + b
            v = K @ z
            r = v - m
            out = float(np.sum(prob.x * t - np.logaddexp(0.0, t))) - float(r @ r) / (2.0 * s2)
            return out + sel.value(v) if sel is not None else out

        val = obj(z)
        limit = max_iter if sel is None else 4 * max_iter
        mu = 0.0
        for _ in range(limit):
            t = a * z + b
            pi = np.exp(-np.logaddexp(0.0, -t))
            W = pi * (1.0 - pi)
            v = K @ z
            g = a * (prob.x - pi) - K @ (v - m) / s2
            H = (KK + sp.diags(a * a * W)).tocsc()
            if sel is None:
                dz = _SPDFactor(H).solve(g)
            else:
                g = g + K @ sel.gradient(v)
                Hd = H.toarray() + K @ (K @ sel.hessian(v)).T
                scale = float(np.mean(np.diag(Hd)))
                while True:
                    try:
                        c = la.cho_factor(Hd + mu * np.eye(prob.n), lower=True)
                        break
                    except la.LinAlgError:
                        mu = max(10.0 * mu, 1e-6 * scale)
                dz = la.cho_solve(c, g)
            step = 1.0
            while True:
                z_new = z + step * dz
                v_new = obj(z_new)
                if v_new >= val - 1e-12 * abs(val) or step < 1e-8:
                    break
                step *= 0.5
            if sel is not None:
                mu = mu / 10.0 if step == 1.0 else max(10.0 * mu, 1e-6 * scale)
                if mu < 1e-12 * scale:
                    mu = 0.0
            z, val = z_new, v_new
            if (np.max(np.abs(step * dz)) <= tol * (1.0 + np.max(np.abs(z)))
                    or np.max(np.abs(g)) <= tol):
                return z
        raise EstimationError(
            f"conditional mode of the scores did not converge in {limit} Newton steps "
            f"(last gradient norm {np.max(np.abs(g)):.3g}, step {step:.3g})")

    def evaluate(self, th, z0, derivatives=True):
        """``psi`` at packed parameters ``th``; optionally its gradient and
        the profile curvature ``Ptt - Pzt^T Pzz^-1 Pzt``."""
        prob = self.prob
        k = prob.k
        params, _ = prob.unpack(np.concatenate([th, np.zeros(prob.n)]))
        z = self.mode(params, z0)
        u = np.concatenate([th, z])
        a, s2 = params.a, prob.sigma ** 2
        t = a * z + params.b
        pi = np.exp(-np.logaddexp(0.0, -t))
        W = pi * (1.0 - pi)
        K = prob.system(params)
        H = ((K @ K) / s2 + sp.diags(a * a * W)).tocsc()
        sel = self.sel
        sel_value = 0.0
        if sel is not None:
            v = K @ z
            GF = sel.curvature(v)
            H = H.toarray() + K @ (K @ GF).T
            sel_value = sel.value(v)
        if not derivatives:
            return prob.value(u) + sel_value - 0.5 * _logdet(H), z
        value, grad, Ptt, Pzt, Pzz = prob.full(u)
        value += sel_value
        sl = prob.slots
        mats = [prob.Y]
        if prob.use_S:
            mats.append(prob.social(params.xi))
            if prob.free_xi:
                mats.extend(prob.slices)
        KD = [(K @ D) / s2 for D in mats]
        hdiag, tr, fac = _hinv_traces(H, KD)
        value -= 0.5 * fac.logdet()
        g = grad[:k].copy()
        dlogdet = None
        if sel is not None:
            Hinv = fac.inverse
            gv = sel.gradient(v)
            Gx = sel.hessian(v)
            Jv = self._dK(params, z)
            g += Jv.T @ gv
            KGJ = K @ (Gx @ Jv)
            Pzt = Pzt - self._dK(params, gv) + KGJ
            Ptt = Ptt + Jv.T @ (Gx @ Jv)
            # tr(H^-1 K G D) and the third-order term through v
            CG = (K @ Hinv).T @ GF
            tr = tr + np.array([float(D.T.multiply(CG).sum()) for D in mats])
            B = K @ (K @ Hinv).T
            tv = sel.curvature_trace_gradient(v, B)
            g += -0.5 * (Jv.T @ tv)
            dlogdet = K @ tv
        # explicit dependence of H on theta
        g[sl["lambda1"]] += tr[0]
        if prob.use_S:
            g[sl["lambda2"]] += tr[1]
            if prob.free_xi:
                g_xi = params.lambda2 * tr[2:]
                g[sl["eta"]] += _softmax_jacobian(params.xi).T @ g_xi
        dW = W * (1.0 - 2.0 * pi)
        g[sl["b"]] += -0.5 * float(hdiag @ (a * a * dW))
        if prob.free_a:
            c = np.sqrt(a)
            g[sl["a"]] += -0.5 * float(hdiag @ (2.0 * a * W + a * a * dW * z)) * 2.0 * c
        # implicit dependence through the mode: dz/dtheta = -H^-1 Pzt
        d_w = hdiag * a ** 3 * dW
        if sel is None:
            X = fac.solve(Pzt)
        else:
            d_w = d_w + dlogdet
            # the mode moves with the exact Hessian, not the expected one
            H_exact = (K @ K).toarray() / s2 + np.diag(a * a * W) + K @ (K @ Gx).T
            X = la.solve(H_exact, Pzt, assume_a="sym")
        g += 0.5 * (X.T @ d_w)
        curv = Ptt - Pzt.T @ X
        return value, z, g, 0.5 * (curv + curv.T)


def _prepare(graph, config, derived, init):
    config = config or FitConfig()
    if config.method not in ("laplace", "map"):
        raise ValidationError(f"unknown fit method {config.method!r}", invariant="method")
    if graph.labels is None:
        raise ValidationError("fit needs labels", invariant="labels present")
    if derived is None:
        derived = derive_networks(graph)
    if init is None:
        params0 = _initial_params(graph, derived, config, derived.with_xi(np.full(derived.q, 1.0 / derived.q)).rho_S)
        eps0 = np.zeros(graph.n)
    else:
        params0, eps0 = (init.params, init.epsilon_hat) if isinstance(init, FitResult) else init
        params0 = params0.replace(sigma_eps=config.sigma_eps)
        if config.fix_lambda2:
            params0 = params0.replace(lambda2=0.0)
        if params0.xi is None:
            params0 = params0.replace(xi=np.full(derived.q, 1.0 / derived.q))
    prob = _Problem(graph, derived, config, params0)
    if not prob.stable(params0):
        raise StabilityViolation("initial parameters are unstable", product=np.nan)
    S0 = prob.social(params0.xi)
    z0 = solve_direct(
        derived.association, S0, graph.attributes, params0, eps0, rho_Y=derived.rho_Y,
        rho_S=prob.rho_S(params0.xi) if params0.lambda2 != 0 else 0.0,
    ).z_star
    return config, derived, prob, params0, z0


def _result(prob, graph, derived, u, value, converged, trace, it, gnorm):
    params, z = prob.unpack(u)
    S = prob.social(params.xi)
    eps = z - params.lambda1 * (derived.association @ z) - graph.attributes @ params.beta - params.alpha
    if prob.use_S:
        eps = eps - params.lambda2 * (S @ z)
    return FitResult(
        params=params, epsilon_hat=eps, z_star=z, log_posterior=value, converged=converged,
        trace=trace, iterations=it, grad_norm=gnorm,
    )


def fit(graph, config=None, derived=None, init=None, formation=None):
    """Estimate the development model from labels.

    Damped Newton ascent with Levenberg damping and backtracking line
    search, either on the Laplace-approximate marginal posterior of the
    parameters (default) or jointly over parameters and latent errors
    (``config.method = "map"``). Every accepted iterate keeps
    ``|lambda1| rho(Y) + |lambda2| rho(S) < 1``. Trial points outside the
    region are projected back onto it (Laplace) or pulled back along the
    step (joint MAP), so a fit may end on the region's edge.

    With ``formation`` the observed association network is also treated as
    an outcome of the scores: the pairwise log-likelihood of ``Y`` under the
    formation model (see :class:`econograph.netform.DyadicFormationTerm`)
    enters the objective. Neighbour similarity that formation explains is
    then no longer attributed to diffusion, which removes the upward
    selection bias of ``lambda1``.

    Parameters
    ----------
    graph : EconomicGraph
        Must carry labels.
    config : FitConfig, optional
    derived : DerivedNetworks, optional
        Precomputed networks; ``derived.association`` may differ from the one
        implied by ``graph`` (e.g. a rewired network).
    init : FitResult or (ModelParams, epsilon), optional
        Warm start.
    formation : FormationParams or DyadicFormationTerm, optional
        Selection-aware refit (Laplace method only).

    Returns
    -------
    FitResult
        ``z_star`` is the (conditional) mode of the scores and
        ``epsilon_hat`` the matching errors. ``log_posterior`` and ``trace``
        hold the maximised objective. ``converged`` is False when
        ``max_iter`` is exhausted.

    Raises
    ------
    EstimationError
        If no stable trial point is found after 20 projections (pull-backs).
    """
    config, derived, prob, params0, z0 = _prepare(graph, config, derived, init)
    u = prob.pack(params0, z0)
    selection = None
    if formation is not None:
        if config.method != "laplace":
            raise ValidationError("a formation term requires method='laplace'", invariant="method")
        from .netform import DyadicFormationTerm

        if graph.n > LOGDET_DENSE_LIMIT:
            raise CapabilityError(f"selection-aware refit is dense; n <= {LOGDET_DENSE_LIMIT} required")
        selection = (formation if isinstance(formation, DyadicFormationTerm)
                     else DyadicFormationTerm(graph.attributes, derived.association, formation))
        if selection.n != graph.n:
            raise ValidationError("formation term size differs from n", invariant="dimension n")
    if config.method == "laplace":
        return _fit_laplace(prob, graph, derived, config, u, selection)
    return _fit_map(prob, graph, derived, config, u)


def _damped_solve(curv, g, mu):
    k = g.size
    try:
        c = la.cho_factor(curv + mu * np.eye(k))
    except la.LinAlgError:
        return None
    d = la.cho_solve(c, g)
    return d if np.all(np.isfinite(d)) else None


def _fit_laplace(prob, graph, derived, config, u, selection=None):
    k = prob.k
    lap = _Laplace(prob, selection)
    th, z = u[:k], u[k:]
    value, z, grad, curv = lap.evaluate(th, z)
    # symmetric rank-one model of the curvature the profile Hessian omits
    extra = np.zeros((k, k))
    trace = [value]
    mu = 1e-8
    converged = False
    it = 0
    gnorm = float(np.max(np.abs(grad)))
    for it in range(1, config.max_iter + 1):
        if gnorm <= config.grad_tol:
            converged = True
            it -= 1
            break
        accepted = False
        for _ in range(12):
            d = _damped_solve(curv + extra, grad, mu)
            if d is None:
                mu = max(mu * 10.0, 1e-6)
                continue
            step, projections = 1.0, 0
            while step > 1e-10:
                th_t = th + step * d
                params_t, _ = prob.unpack(np.concatenate([th_t, z]))
                if not prob.stable(params_t):
                    # unstable trial: project the diffusion weights back
                    th_t = prob.project(th_t)
                    projections += 1
                    if not prob.stable(prob.unpack(np.concatenate([th_t, z]))[0]):
                        if projections >= 20:
                            raise EstimationError("no stable trial point after 20 projections")
                        step *= 0.5
                        continue
                v_t, z_t = lap.evaluate(th_t, z, derivatives=False)
                if v_t >= value + 1e-4 * float(grad @ (th_t - th)):
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
            extra[:] = 0.0
            mu = max(mu * 10.0, 1e-6)
        if not accepted:
            log.info("line search failed at iteration %d; stopping", it)
            converged = gnorm <= config.grad_tol
            break
        s_step = th_t - th
        th = th_t
        grad_old = grad
        value_new, z, grad, curv = lap.evaluate(th, z_t)
        r = -(grad - grad_old) - (curv + extra) @ s_step
        denom = float(r @ s_step)
        if abs(denom) > 1e-8 * np.linalg.norm(r) * np.linalg.norm(s_step):
            extra += np.outer(r, r) / denom
        gain = value_new - value
        value = value_new
        gnorm = float(np.max(np.abs(grad)))
        trace.append(value)
        mu = max(mu / 10.0, 1e-10) if step == 1.0 else mu
        if gain <= config.gain_tol:
            converged = True
            break
    else:
        converged = gnorm <= config.grad_tol
    return _result(prob, graph, derived, np.concatenate([th, z]), value, converged, trace, it, gnorm)


def _fit_map(prob, graph, derived, config, u):
    value, grad, Ptt, Pzt, Pzz = prob.full(u)
    trace = [value]
    mu = 1e-8
    converged = False
    it = 0
    gnorm = float(np.max(np.abs(grad)))
    for it in range(1, config.max_iter + 1):
        if gnorm <= config.grad_tol:
            converged = True
            it -= 1
            break
        accepted = False
        for _ in range(12):
            d = _newton_step(Ptt, Pzt, Pzz, grad, prob.k, mu)
            if d is None:
                mu = max(mu * 10.0, 1e-6)
                continue
            slope = float(grad @ d)
            step, pulls = 1.0, 0
            while step > 1e-10:
                trial = u + step * d
                params_t, _ = prob.unpack(trial)
                if not prob.stable(params_t):
                    pulls += 1
                    if pulls >= 20:
                        raise EstimationError("no stable trial point after 20 pull-backs")
                    step *= 0.5
                    continue
                v_t = prob.value(trial)
                if v_t >= value + 1e-4 * step * slope:
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
            mu = max(mu * 10.0, 1e-6)
        if not accepted:
            log.info("line search failed at iteration %d; stopping", it)
            converged = gnorm <= config.grad_tol
            break
        gain = v_t - value
        u = trial
        value, grad, Ptt, Pzt, Pzz = prob.full(u)
        gnorm = float(np.max(np.abs(grad)))
        trace.append(value)
        mu = max(mu / 10.0, 1e-10) if step == 1.0 else mu
        if gain <= config.gain_tol:
            converged = True
            break
    else:
        converged = gnorm <= config.grad_tol
    return _result(prob, graph, derived, u, value, converged, trace, it, gnorm)
