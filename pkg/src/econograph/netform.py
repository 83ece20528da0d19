"""Network formation as an exponential random graph over the association network.

Each community's utility from the association network ``Y`` is

    u_i = eta_pop * deg_i + eta_tri * tri_i + eta_sim * sim_i
          + rho * z_i * deg_i + w * sum_j Y_ij |z_i - z_j|

with ``deg`` the degree, ``tri`` the closed triangles through ``i``, ``sim``
the summed (negative) attribute distance to neighbours and ``z`` the
development score. The score terms are attached to links: a constant
``rho * z_i`` would cancel from the normaliser and carry no information
about ``Y``. ``P(Y) ∝ exp(sum_i u_i(Y))``, so

    sum_i u_i = theta . T(Y; z)

is linear in ``theta = (eta_pop, eta_tri, eta_sim, rho, w)`` with sufficient
statistics ``T`` (see :func:`sufficient_statistics`).

The joint posterior over ``theta`` and the robust score is sampled with the
exchange algorithm: every proposal draws an auxiliary network from the
proposed model with a single-edge-toggle Metropolis chain, which cancels
the intractable normaliser.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .errors import CapabilityError, EstimationError, ValidationError

__all__ = [
    "FormationParams",
    "NetworkStatistics",
    "network_statistics",
    "attribute_similarity",
    "pair_cost",
    "utility",
    "utilities",
    "sufficient_statistics",
    "toggle_delta",
    "ergm_log_prob_exact",
    "ergm_graph_distribution",
    "sample_network",
    "JointConfig",
    "ChainDiagnostics",
    "RobustScoreResult",
    "fit_joint",
    "split_rhat",
    "DyadicFormationTerm",
    "PARAM_NAMES",
]

log = logging.getLogger(__name__)

PARAM_NAMES = ("eta_pop", "eta_tri", "eta_sim", "rho", "w")
EXACT_MAX_N = 7
SAMPLER_MAX_N = 20_000
DYADIC_MAX_N = 5000


@dataclass(frozen=True)
class FormationParams:
    """Formation coefficients.

    ``eta`` weights (popularity, transitive triads, attribute similarity);
    ``rho`` the own-score link activity, ``w`` the score-distance link cost
    (negative ``w`` makes links between similar scores likelier);
    ``sigma_eps_vec`` the prior scale of the score correction.
    """

    eta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rho: float = 0.0
    w: float = 0.0
    sigma_eps_vec: float = 1.0

    def __post_init__(self):
        eta = np.array(self.eta, dtype=np.float64, copy=True).ravel()
        if eta.size != 3:
            raise ValidationError("eta must have 3 entries (popularity, triads, similarity)",
                                  invariant="eta length 3")
        if not np.all(np.isfinite(eta)):
            raise ValidationError("eta must be finite", invariant="eta finite")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "sigma_eps_vec", float(self.sigma_eps_vec))
        if not self.sigma_eps_vec > 0:
            raise ValidationError("sigma_eps_vec must be positive", invariant="sigma_eps_vec > 0")

    @property
    def theta(self):
        return np.array([*self.eta, self.rho, self.w])

    @classmethod
    def from_theta(cls, theta, sigma_eps_vec=1.0):
        theta = np.asarray(theta, dtype=np.float64)
        return cls(eta=theta[:3], rho=theta[3], w=theta[4], sigma_eps_vec=sigma_eps_vec)

    def replace(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        return {**dict(zip(PARAM_NAMES, map(float, self.theta))), "sigma_eps_vec": self.sigma_eps_vec}

    @classmethod
    def from_dict(cls, d):
        theta = [float(d.get(k, 0.0)) for k in PARAM_NAMES]
        return cls.from_theta(theta, float(d.get("sigma_eps_vec", 1.0)))


@dataclass(frozen=True)
class NetworkStatistics:
    popularity: np.ndarray
    transitive_triads: np.ndarray
    attr_similarity: np.ndarray


def _dense_binary(Y):
    if sp.issparse(Y):
        return Y.toarray().astype(np.uint8)
    return (np.asarray(Y) != 0).astype(np.uint8)


def _csr(Y):
    Y = sp.csr_matrix(Y, dtype=np.float64)
    Y.eliminate_zeros()
    return Y


def _zscore(A):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    sd = A.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (A - A.mean(axis=0)) / sd


def attribute_similarity(A):
    """Pairwise ``-||A_i - A_j||`` on z-scored attributes (dense n x n)."""
    Z = _zscore(A)
    sq = np.sum(Z * Z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * Z @ Z.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return -np.sqrt(d2)


def _edge_similarity(Z, rows, cols):
    return -np.linalg.norm(Z[rows] - Z[cols], axis=1)


def network_statistics(A, Y):
    """Per-community popularity, closed triangles and neighbour similarity."""
    Y = _csr(Y)
    Z = _zscore(A)
    deg = np.asarray(Y.sum(axis=1)).ravel()
    tri = np.asarray((Y @ Y).multiply(Y).sum(axis=1)).ravel() / 2.0
    coo = Y.tocoo()
    s = _edge_similarity(Z, coo.row, coo.col)
    sim = np.bincount(coo.row, weights=s, minlength=Y.shape[0])
    return NetworkStatistics(deg, tri, sim)


def pair_cost(z):
    """``psi_ij = |z_i - z_j|``."""
    z = np.asarray(z, dtype=np.float64).ravel()
    return np.abs(z[:, None] - z[None, :])


def utilities(Y, A, z, params):
    """Utility of every community under ``Y``."""
    Y = _csr(Y)
    z = np.asarray(z, dtype=np.float64).ravel()
    st = network_statistics(A, Y)
    coo = Y.tocoo()
    cost = np.bincount(coo.row, weights=np.abs(z[coo.row] - z[coo.col]), minlength=Y.shape[0])
    e = params.eta
    return (e[0] * st.popularity + e[1] * st.transitive_triads + e[2] * st.attr_similarity
            + params.rho * z * st.popularity + params.w * cost)


def utility(i, Y, A, z, params):
    """Utility of community ``i``."""
    return float(utilities(Y, A, z, params)[i])


def sufficient_statistics(Y, A, z):
    """``T(Y; z)`` with ``sum_i u_i = theta . T``.

    Entries: twice the edge count, three times the triangle count, twice the
    summed edge similarity, ``sum_i z_i deg_i`` and twice the summed edge
    score distance.
    """
    Y = _csr(Y)
    z = np.asarray(z, dtype=np.float64).ravel()
    up = sp.triu(Y, k=1).tocoo()
    r, c = up.row, up.col
    tri = float((Y @ Y).multiply(Y).sum()) / 6.0
    s = _edge_similarity(_zscore(A), r, c).sum()
    return np.array([
        2.0 * r.size,
        3.0 * tri,
        2.0 * s,
        float(np.sum(z[r] + z[c])),
        2.0 * float(np.sum(np.abs(z[r] - z[c]))),
    ])


def _score_statistics(Yu, z):
    # the two score-dependent entries of T from upper-triangle edge lists
    r, c = Yu
    return np.array([np.sum(z[r] + z[c]), 2.0 * np.sum(np.abs(z[r] - z[c]))])


def toggle_delta(Y, i, j, A, z, params):
    """Change in ``sum_k u_k`` when dyad ``(i, j)`` is toggled.

    Uses rows ``i`` and ``j`` only (their common neighbours).
    """
    if i == j:
        raise ValidationError("cannot toggle a self-loop", invariant="i != j")
    Y = _csr(Y)
    z = np.asarray(z, dtype=np.float64).ravel()
    Z = _zscore(A)
    common = float(Y[i].multiply(Y[j]).sum())
    e = params.eta
    d = (2.0 * e[0] + 3.0 * e[1] * common - 2.0 * e[2] * np.linalg.norm(Z[i] - Z[j])
         + params.rho * (z[i] + z[j]) + 2.0 * params.w * abs(z[i] - z[j]))
    return -d if Y[i, j] else d


class DyadicFormationTerm:
    """Log-likelihood of the observed ``Y`` as a function of the score.

    Sums, over all dyads, the logistic log-probability of the observed tie
    state given the rest of the network,

        l_ij = 2 eta_pop + 3 eta_tri c_ij + 2 eta_sim s_ij
               + rho (z_i + z_j) + 2 w phi(z_i - z_j),

    with ``c_ij`` the common neighbours in ``Y``. This is the exact
    likelihood when ``eta_tri = 0`` (dyads are then independent) and the
    pseudo-likelihood otherwise. ``phi(d) = sqrt(d^2 + delta^2) - delta``
    is a smoothed ``|d|``: with ``w < 0`` the exact kink acts like a fused
    penalty whose optimum sits on ties, where Newton steps stall.
    Dense in ``n``.
    """

    def __init__(self, A, Y, params, smoothing=0.1):
        Yd = _dense_binary(Y).astype(np.float64)
        n = Yd.shape[0]
        if n > DYADIC_MAX_N:
            raise CapabilityError(f"dyadic formation term is dense; n <= {DYADIC_MAX_N} required")
        if smoothing <= 0:
            raise ValidationError("smoothing must be positive", invariant="smoothing > 0")
        np.fill_diagonal(Yd, 0.0)
        e = params.eta
        C = 2.0 * e[0] + 2.0 * e[2] * attribute_similarity(A)
        if e[1] != 0.0:
            C = C + 3.0 * e[1] * (Yd @ Yd)
        self.n = n
        self.Y = Yd
        self.C = C
        self.rho = float(params.rho)
        self.w = float(params.w)
        self.delta = float(smoothing)
        self.off = ~np.eye(n, dtype=bool)
        self._cache = None

    def _parts(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self._cache is not None and np.array_equal(self._cache[0], z):
            return self._cache[1]
        out = self._compute(z)
        self._cache = (z.copy(), out)
        return out

    def _compute(self, z):
        D = z[:, None] - z[None, :]
        r = np.sqrt(D * D + self.delta ** 2)
        L = self.C + self.rho * (z[:, None] + z[None, :]) + 2.0 * self.w * (r - self.delta)
        P = np.exp(-np.logaddexp(0.0, -L))
        # dl_ij / dz_i (its transpose is dl_ij / dz_j) and d2 l_ij / dz_i^2
        Dk = self.rho + 2.0 * self.w * D / r
        c = 2.0 * self.w * self.delta ** 2 / r ** 3
        return L, P, Dk, c

    def value(self, z):
        L, _, _, _ = self._parts(z)
        T = self.Y * L - np.logaddexp(0.0, L)
        return 0.5 * float(np.sum(T[self.off]))

    def gradient(self, z):
        _, P, Dk, _ = self._parts(z)
        G = (self.Y - P) * Dk
        np.fill_diagonal(G, 0.0)
        return G.sum(axis=1)

    @staticmethod
    def _pairwise(M, coef):
        # adds sum over pairs of coef_ij (e_i - e_j)(e_i - e_j)^T
        np.fill_diagonal(coef, 0.0)
        M -= coef
        M[np.diag_indices(M.shape[0])] += coef.sum(axis=1)
        return M

    def curvature(self, z):
        """Expected negated Hessian (Fisher information, positive semidefinite)."""
        _, P, Dk, _ = self._parts(z)
        V = P * (1.0 - P)
        np.fill_diagonal(V, 0.0)
        M = V * Dk * Dk.T
        M[np.diag_indices(self.n)] = np.sum(V * Dk * Dk, axis=1)
        return M

    def hessian(self, z, clip=False):
        """Negated Hessian; ``clip`` drops the pairs that make it indefinite."""
        _, P, _, c = self._parts(z)
        coef = -(self.Y - P) * c
        if clip:
            coef = np.maximum(coef, 0.0)
        return self._pairwise(self.curvature(z), coef)

    def curvature_trace_gradient(self, z, Hinv):
        """``tr(Hinv dM/dz_k)`` for every ``k`` with ``M`` = :meth:`curvature`."""
        _, P, Dk, c = self._parts(z)
        V = P * (1.0 - P)
        V1 = V * (1.0 - 2.0 * P)
        np.fill_diagonal(V, 0.0)
        np.fill_diagonal(V1, 0.0)
        h = np.diag(Hinv)
        Dj = Dk.T
        Q = Dk * Dk * h[:, None] + Dj * Dj * h[None, :] + 2.0 * Dk * Dj * Hinv
        dQ = 2.0 * c * (Dk * h[:, None] - Dj * h[None, :] + Hinv * (Dj - Dk))
        return np.sum(V1 * Dk * Q + V * dQ, axis=1)


# ---------------------------------------------------------------------------
# exact enumeration
# ---------------------------------------------------------------------------


def _enumeration_terms(n, A, z, params):
    rows, cols = np.triu_indices(n, k=1)
    z = np.asarray(z, dtype=np.float64).ravel()
    e = params.eta
    Z = _zscore(A)
    edge_w = (2.0 * e[0] + 2.0 * e[2] * _edge_similarity(Z, rows, cols)
              + params.rho * (z[rows] + z[cols]) + 2.0 * params.w * np.abs(z[rows] - z[cols]))
    index = -np.ones((n, n), dtype=np.int64)
    index[rows, cols] = np.arange(rows.size)
    index[cols, rows] = np.arange(rows.size)
    tri = np.array([(index[i, j], index[i, k], index[j, k])
                    for i in range(n) for j in range(i + 1, n) for k in range(j + 1, n)],
                   dtype=np.int64).reshape(-1, 3)
    return edge_w, tri, index


def _total_utilities(edge_w, tri, eta_tri, masks):
    bits = ((masks[:, None] >> np.arange(edge_w.size, dtype=np.int64)) & 1).astype(np.float64)
    out = bits @ edge_w
    if eta_tri != 0.0 and tri.size:
        closed = bits[:, tri[:, 0]] * bits[:, tri[:, 1]] * bits[:, tri[:, 2]]
        out += 3.0 * eta_tri * closed.sum(axis=1)
    return out


def _graph_code(Y, index):
    Yd = _dense_binary(Y)
    r, c = np.nonzero(np.triu(Yd, k=1))
    return int(np.sum(np.left_shift(np.int64(1), index[r, c]))) if r.size else 0


def ergm_graph_distribution(n, A, z, params, chunk=1 << 16):
    """Log-probabilities of all ``2^(n(n-1)/2)`` graphs, indexed by edge bitmask.

    Bit ``e`` of the index is the ``e``-th pair of ``np.triu_indices(n, 1)``.
    """
    if n > EXACT_MAX_N:
        raise CapabilityError(
            f"exact enumeration needs n <= {EXACT_MAX_N} (got {n}); use sample_network / fit_joint"
        )
    edge_w, tri, _ = _enumeration_terms(n, A, z, params)
    total = 1 << edge_w.size
    U = np.empty(total)
    for start in range(0, total, chunk):
        masks = np.arange(start, min(total, start + chunk), dtype=np.int64)
        U[start:start + masks.size] = _total_utilities(edge_w, tri, params.eta[1], masks)
    return U - logsumexp(U)


def ergm_log_prob_exact(Y, A, z, params):
    """Exact ``log P(Y)`` under the formation model by full enumeration (``n <= 7``)."""
    Yd = _dense_binary(Y)
    n = Yd.shape[0]
    if n > EXACT_MAX_N:
        raise CapabilityError(
            f"exact enumeration needs n <= {EXACT_MAX_N} (got {n}); use sample_network / fit_joint"
        )
    edge_w, tri, index = _enumeration_terms(n, A, z, params)
    total = 1 << edge_w.size
    chunk = 1 << 16
    parts = []
    for start in range(0, total, chunk):
        masks = np.arange(start, min(total, start + chunk), dtype=np.int64)
        parts.append(logsumexp(_total_utilities(edge_w, tri, params.eta[1], masks)))
    log_z = logsumexp(parts)
    own = _total_utilities(edge_w, tri, params.eta[1], np.array([_graph_code(Yd, index)], dtype=np.int64))
    return float(own[0] - log_z)


# ---------------------------------------------------------------------------
# toggle sampler
# ---------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _toggle_kernel(Y, Z, z, theta, ii, jj, logu, code, index, codes, record):
    n = Y.shape[0]
    p = Z.shape[1]
    e_pop, e_tri, e_sim, rho, w = theta[0], theta[1], theta[2], theta[3], theta[4]
    for s in range(ii.size):
        i = ii[s]
        j = jj[s]
        if j >= i:
            j += 1
        d = 2.0 * e_pop + rho * (z[i] + z[j]) + 2.0 * w * abs(z[i] - z[j])
        if e_sim != 0.0:
            acc = 0.0
            for k in range(p):
                diff = Z[i, k] - Z[j, k]
                acc += diff * diff
            d -= 2.0 * e_sim * np.sqrt(acc)
        if e_tri != 0.0:
            c = 0
            for k in range(n):
                c += Y[i, k] & Y[j, k]
            d += 3.0 * e_tri * c
        if Y[i, j]:
            d = -d
        if logu[s] < d:
            Y[i, j] ^= 1
            Y[j, i] ^= 1
            if record:
                code ^= np.int64(1) << index[i, j]
        if record:
            codes[s] = code
    return code


class _Sampler:
    """Reusable toggle-chain driver for one set of attributes."""

    chunk = 1 << 20

    def __init__(self, A, n):
        if n > SAMPLER_MAX_N:
            raise CapabilityError(f"toggle sampler holds a dense n x n network; n <= {SAMPLER_MAX_N}")
        if n < 2:
            raise ValidationError("need at least two communities to sample links", invariant="n >= 2")
        self.n = n
        self.Z = np.ascontiguousarray(_zscore(A))
        self._dummy_index = np.zeros((1, 1), dtype=np.int64)
        self._dummy_codes = np.zeros(0, dtype=np.int64)

    def run(self, Y, z, theta, n_steps, rng, record=False):
        """Advance dense ``Y`` (modified in place) by ``n_steps`` toggles."""
        n = self.n
        z = np.ascontiguousarray(z, dtype=np.float64)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        codes_all = []
        code = 0
        index = self._dummy_index
        if record:
            rows, cols = np.triu_indices(n, k=1)
            index = np.zeros((n, n), dtype=np.int64)
            index[rows, cols] = np.arange(rows.size)
            index[cols, rows] = np.arange(rows.size)
            r, c = np.nonzero(np.triu(Y, k=1))
            code = int(np.sum(np.left_shift(np.int64(1), index[r, c]))) if r.size else 0
        done = 0
        while done < n_steps:
            m = min(self.chunk, n_steps - done)
            ii = rng.integers(0, n, size=m, dtype=np.int64)
            jj = rng.integers(0, n - 1, size=m, dtype=np.int64)
            logu = np.log(rng.random(m))
            codes = np.empty(m, dtype=np.int64) if record else self._dummy_codes
            code = _toggle_kernel(Y, self.Z, z, theta, ii, jj, logu, np.int64(code), index, codes, record)
            if record:
                codes_all.append(codes)
            done += m
        return np.concatenate(codes_all) if record else None


def sample_network(A, z, params, seed, n_steps, initial=None, return_codes=False):
    """Single-edge-toggle Metropolis chain targeting the formation model.

    Each step picks an unordered pair uniformly and toggles it with
    probability ``min(1, exp(delta))`` where ``delta`` is the change in total
    utility; no normaliser is needed.

    Parameters
    ----------
    A : ndarray (n, p)
    z : ndarray (n,)
    params : FormationParams
    seed : int or numpy.random.Generator
    n_steps : int
    initial : sparse or array (n, n), optional
        Starting network (empty by default).
    return_codes : bool
        Also return the edge bitmask of the state after every step
        (``n <= 11``; bit order as in :func:`ergm_graph_distribution`).

    Returns
    -------
    scipy.sparse.csr_matrix, and optionally the code array.
    """
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1", invariant="n_steps >= 1")
    z = np.asarray(z, dtype=np.float64).ravel()
    n = z.size
    if return_codes and n * (n - 1) // 2 > 62:
        raise CapabilityError("graph codes need n(n-1)/2 <= 62")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sampler = _Sampler(A, n)
    Y = np.zeros((n, n), dtype=np.uint8) if initial is None else _dense_binary(initial)
    np.fill_diagonal(Y, 0)
    codes = sampler.run(Y, z, params.theta, int(n_steps), rng, record=return_codes)
    out = sp.csr_matrix(Y.astype(np.float64))
    return (out, codes) if return_codes else out


# ---------------------------------------------------------------------------
# joint estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointConfig:
    """Settings of the joint formation/score sampler.

    ``freeze`` names parameters held at their ``init`` value (any of
    ``PARAM_NAMES``, or ``"eta"`` for all three network-statistic weights).
    ``method="dyadic"`` replaces the exchange step with the exact
    dyad-independent likelihood; it requires ``eta_tri`` frozen at 0.
    """

    chains: int = 3
    iters: int = 50_000
    burn_frac: float = 0.2
    thin: int = 10
    aux_steps_factor: float = 50.0
    prior_sd: float = 10.0
    sigma_eps_vec: float | None = None
    seed: int = 0
    freeze: tuple = ()
    init: FormationParams | None = None
    target_accept: float = 0.3
    method: str = "exchange"
    parallel: bool = False

    def __post_init__(self):
        if self.chains < 1 or self.iters < 2 or self.thin < 1:
            raise ValidationError("chains >= 1, iters >= 2 and thin >= 1 required",
                                  invariant="chain sizes")
        if not 0.0 <= self.burn_frac < 1.0:
            raise ValidationError("burn_frac must be in [0, 1)", invariant="burn_frac range")
        if self.aux_steps_factor <= 0 or self.prior_sd <= 0:
            raise ValidationError("aux_steps_factor and prior_sd must be positive",
                                  invariant="positive settings")
        if self.method not in ("exchange", "dyadic"):
            raise ValidationError(f"unknown method {self.method!r}", invariant="method")
        bad = set(self.freeze) - set(PARAM_NAMES) - {"eta"}
        if bad:
            raise ValidationError(f"unknown frozen parameters {sorted(bad)}", invariant="freeze names")

    def frozen_mask(self):
        names = set(self.freeze)
        if "eta" in names:
            names |= {"eta_pop", "eta_tri", "eta_sim"}
        return np.array([k in names for k in PARAM_NAMES])


@dataclass
class ChainDiagnostics:
    accept_theta: np.ndarray
    accept_score: np.ndarray
    proposal_scale: np.ndarray
    score_step: np.ndarray
    kept: int
    thin: int
    rhat: dict
    converged: bool
    warnings: list


@dataclass
class RobustScoreResult:
    """Posterior summary of the joint formation/score model.

    ``eps_corrected`` is exactly ``z_star - z_robust``.
    """

    z_robust: np.ndarray
    eps_corrected: np.ndarray
    formation: FormationParams
    chains: ChainDiagnostics
    z_star: np.ndarray
    posterior_sd: np.ndarray
    draws: np.ndarray
    score_sd: np.ndarray

    def summary_rows(self):
        """``(parameter, mean, sd, rhat)`` rows for the posterior table."""
        theta = self.formation.theta
        return [(name, float(theta[k]), float(self.posterior_sd[k]), float(self.chains.rhat[name]))
                for k, name in enumerate(PARAM_NAMES)]


def split_rhat(chains):
    """Split-chain potential scale reduction for draws shaped ``(chains, draws)``.

    Returns NaN for a constant parameter.
    """
    x = np.asarray(chains, dtype=np.float64)
    m, n = x.shape
    half = n // 2
    if half < 2:
        return np.nan
    parts = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = half * means.var(ddof=1)
    if W <= 0:
        return np.nan if B <= 0 else np.inf
    var = (half - 1) / half * W + B / half
    return float(np.sqrt(var / W))


class _JointModel:
    def __init__(self, graph_A, Y, z_star, config):
        self.A = graph_A
        self.Yd = _dense_binary(Y)
        np.fill_diagonal(self.Yd, 0)
        self.n = self.Yd.shape[0]
        self.z_star = np.asarray(z_star, dtype=np.float64).ravel()
        if self.z_star.size != self.n:
            raise ValidationError("z_star length differs from the network size", invariant="dimension n")
        self.cfg = config
        Ycsr = sp.csr_matrix(self.Yd.astype(np.float64))
        self.T_fixed = sufficient_statistics(Ycsr, graph_A, np.zeros(self.n))[:3]
        up = sp.triu(Ycsr, k=1).tocoo()
        self.edges = (up.row, up.col)
        self.aux_steps = max(1, int(round(config.aux_steps_factor * self.n * (self.n - 1) / 2)))
        self.frozen = config.frozen_mask()
        self.free = ~self.frozen
        if config.method == "dyadic":
            init = config.init or FormationParams()
            if not (self.frozen[1] and init.eta[1] == 0.0):
                raise ValidationError("dyadic likelihood requires eta_tri frozen at 0",
                                      invariant="eta_tri = 0 for dyadic method")
            rows, cols = np.triu_indices(self.n, k=1)
            Z = _zscore(graph_A)
            self.pairs = (rows, cols, self.Yd[rows, cols].astype(np.float64),
                          _edge_similarity(Z, rows, cols))
        else:
            self.sampler = _Sampler(graph_A, self.n)

    def stats(self, zeta):
        return np.concatenate([self.T_fixed, _score_statistics(self.edges, zeta)])

    def aux_stats(self, theta, zeta, rng):
        Y = self.Yd.copy()
        self.sampler.run(Y, zeta, theta, self.aux_steps, rng)
        r, c = np.nonzero(np.triu(Y, k=1))
        Yc = sp.csr_matrix((np.ones(r.size), (r, c)), shape=Y.shape)
        Yc = Yc + Yc.T
        fixed = sufficient_statistics(Yc, self.A, np.zeros(self.n))[:3]
        return np.concatenate([fixed, _score_statistics((r, c), zeta)]), (r, c)

    def dyadic_loglik(self, theta, zeta):
        rows, cols, y, s = self.pairs
        d = (2.0 * theta[0] + 2.0 * theta[2] * s + theta[3] * (zeta[rows] + zeta[cols])
             + 2.0 * theta[4] * np.abs(zeta[rows] - zeta[cols]))
        return float(np.sum(y * d - np.logaddexp(0.0, d)))

    def fisher(self, theta, zeta):
        """Dyadic pseudo-likelihood information, used to shape proposals."""
        rows, cols = np.triu_indices(self.n, k=1)
        Z = _zscore(self.A)
        common = (self.Yd.astype(np.float64) @ self.Yd.astype(np.float64))[rows, cols]
        t = np.column_stack([
            np.full(rows.size, 2.0), 3.0 * common, 2.0 * _edge_similarity(Z, rows, cols),
            zeta[rows] + zeta[cols], 2.0 * np.abs(zeta[rows] - zeta[cols]),
        ])
        d = t @ theta
        pr = np.exp(-np.logaddexp(0.0, -d))
        return (t * (pr * (1.0 - pr))[:, None]).T @ t


def _log_prior(theta, sd):
    return -0.5 * float(theta @ theta) / (sd * sd)


def _run_chain(model, theta0, zeta0, sigma, rng, cfg, chol):
    n = model.n
    iters = cfg.iters
    burn = int(cfg.burn_frac * iters)
    free = model.free
    n_free = int(free.sum())
    keep_idx = np.arange(burn, iters)[:: cfg.thin]
    theta_draws = np.empty((keep_idx.size, 5))
    zeta_sum = np.zeros(n)
    zeta_sq = np.zeros(n)
    theta = theta0.copy()
    zeta = zeta0.copy()
    z_star = model.z_star
    log_scale = np.log(2.38 / np.sqrt(max(n_free, 1)))
    beta_pcn = 0.1
    acc_t = acc_z = tried_t = tried_z = 0
    win_t = win_z = 0
    dyadic = cfg.method == "dyadic"
    T_obs = model.stats(zeta)
    ll = model.dyadic_loglik(theta, zeta) if dyadic else None
    score_active = theta[3] != 0.0 or theta[4] != 0.0 or not (model.frozen[3] and model.frozen[4])
    k_keep = 0
    for it in range(iters):
        adapting = it < burn
        gamma = 1.0 / np.sqrt(1.0 + it) if adapting else 0.0
        # parameter block
        if n_free:
            step = np.zeros(5)
            step[free] = np.exp(log_scale) * (chol @ rng.standard_normal(n_free))
            prop = theta + step
            if dyadic:
                ll_p = model.dyadic_loglik(prop, zeta)
                log_a = ll_p - ll
            else:
                T_aux, _ = model.aux_stats(prop, zeta, rng)
                log_a = float((prop - theta) @ (T_obs - T_aux))
            log_a += _log_prior(prop, cfg.prior_sd) - _log_prior(theta, cfg.prior_sd)
            if not np.isfinite(log_a):
                raise EstimationError("non-finite acceptance ratio in the parameter block")
            a_prob = min(1.0, np.exp(min(log_a, 0.0)))
            if np.log(rng.random()) < log_a:
                theta = prop
                if dyadic:
                    ll = ll_p
                acc_t += 1
                win_t += 1
            tried_t += 1
            if adapting:
                log_scale += gamma * (a_prob - cfg.target_accept)
        # score block (preconditioned Crank-Nicolson, prior-reversible)
        if score_active:
            prop_z = z_star + np.sqrt(1.0 - beta_pcn ** 2) * (zeta - z_star) + beta_pcn * sigma * rng.standard_normal(n)
            if theta[3] == 0.0 and theta[4] == 0.0:
                log_a = 0.0  # the likelihood does not involve the score
            elif dyadic:
                ll_p = model.dyadic_loglik(theta, prop_z)
                log_a = ll_p - ll
            else:
                T_obs_p = model.stats(prop_z)
                _, aux_edges = model.aux_stats(theta, prop_z, rng)
                d_aux = _score_statistics(aux_edges, prop_z) - _score_statistics(aux_edges, zeta)
                log_a = float(theta[3:] @ (T_obs_p[3:] - T_obs[3:] - d_aux))
            if not np.isfinite(log_a):
                raise EstimationError("non-finite acceptance ratio in the score block")
            a_prob = min(1.0, np.exp(min(log_a, 0.0)))
            if np.log(rng.random()) < log_a:
                zeta = prop_z
                T_obs = model.stats(zeta)
                if dyadic:
                    ll = ll_p
                acc_z += 1
                win_z += 1
            tried_z += 1
            if adapting:
                logit = np.log(beta_pcn / (1.0 - beta_pcn)) + gamma * (a_prob - cfg.target_accept)
                beta_pcn = float(np.clip(1.0 / (1.0 + np.exp(-logit)), 1e-4, 0.999))
        else:
            # prior draw: exact independent sample
            zeta = z_star + sigma * rng.standard_normal(n)
        if dyadic and not score_active:
            ll = model.dyadic_loglik(theta, zeta)
        if it == burn - 1:
            acc_t = acc_z = tried_t = tried_z = 0
        if k_keep < keep_idx.size and it == keep_idx[k_keep]:
            theta_draws[k_keep] = theta
            zeta_sum += zeta
            zeta_sq += zeta * zeta
            k_keep += 1
    rate_t = acc_t / tried_t if tried_t else np.nan
    rate_z = acc_z / tried_z if tried_z else np.nan
    return theta_draws, zeta_sum, zeta_sq, k_keep, rate_t, rate_z, float(np.exp(log_scale)), beta_pcn


def fit_joint(graph, derived, z_star, config=None):
    """Posterior of the formation parameters and the robust score.

    Targets ``P(Y | z_robust, theta) * prod_i N(z_star_i - z_robust_i; 0, s^2)``
    times independent ``N(0, prior_sd^2)`` priors on ``theta`` with the
    exchange algorithm. Each iteration updates ``theta`` (Gaussian random
    walk shaped by the pseudo-likelihood information) and then the robust
    score (preconditioned Crank-Nicolson around ``z_star``); step sizes adapt
    towards ``target_accept`` during burn-in only.

    Parameters
    ----------
    graph : EconomicGraph
        Supplies the attributes.
    derived : DerivedNetworks
        ``derived.association`` is the observed network ``Y``.
    z_star : ndarray (n,) or FitResult
    config : JointConfig, optional

    Returns
    -------
    RobustScoreResult

    Raises
    ------
    EstimationError
        When a chain produces a non-finite acceptance ratio.
    """
    cfg = config or JointConfig()
    if hasattr(z_star, "z_star"):
        sigma_default = z_star.params.sigma_eps
        z_star = z_star.z_star
    else:
        sigma_default = 1.0
    sigma = cfg.sigma_eps_vec if cfg.sigma_eps_vec is not None else sigma_default
    init = cfg.init or FormationParams(sigma_eps_vec=sigma)
    model = _JointModel(graph.attributes, derived.association, z_star, cfg)
    theta0 = init.theta
    info = model.fisher(theta0, model.z_star) + np.eye(5) / cfg.prior_sd ** 2
    free = model.free
    if free.any():
        cov = np.linalg.inv(info[np.ix_(free, free)])
        chol = np.linalg.cholesky(0.5 * (cov + cov.T))
    else:
        chol = np.zeros((0, 0))
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)

    def one(c):
        rng = np.random.default_rng(seeds[c])
        return _run_chain(model, theta0, model.z_star.copy(), sigma, rng, cfg, chol)

    if cfg.parallel and cfg.chains > 1:
        with ThreadPoolExecutor(max_workers=cfg.chains) as ex:
            outs = list(ex.map(one, range(cfg.chains)))
    else:
        outs = [one(c) for c in range(cfg.chains)]

    draws = np.stack([o[0] for o in outs])
    kept = sum(o[3] for o in outs)
    zeta_mean = sum(o[1] for o in outs) / kept
    zeta_var = np.maximum(sum(o[2] for o in outs) / kept - zeta_mean ** 2, 0.0)
    flat = draws.reshape(-1, 5)
    mean = flat.mean(axis=0)
    sd = flat.std(axis=0, ddof=1) if flat.shape[0] > 1 else np.zeros(5)
    rhat = {}
    for k, name in enumerate(PARAM_NAMES):
        rhat[name] = np.nan if model.frozen[k] or cfg.chains < 2 else split_rhat(draws[:, :, k])
    warnings = []
    rates_t = np.array([o[4] for o in outs])
    rates_z = np.array([o[5] for o in outs])
    for label, rates in (("parameter", rates_t), ("score", rates_z)):
        for c, r in enumerate(rates):
            if np.isfinite(r) and not 0.05 <= r <= 0.7:
                warnings.append(f"chain {c}: {label} acceptance {r:.3f} outside [0.05, 0.7]")
    finite = [v for v in rhat.values() if np.isfinite(v) or v == np.inf]
    converged = all(v < 1.1 for v in finite)
    if not converged:
        warnings.append("split R-hat >= 1.1 for at least one parameter")
    for msg in warnings:
        log.warning(msg)
    diag = ChainDiagnostics(
        accept_theta=rates_t, accept_score=rates_z,
        proposal_scale=np.array([o[6] for o in outs]), score_step=np.array([o[7] for o in outs]),
        kept=kept, thin=cfg.thin, rhat=rhat, converged=converged, warnings=warnings,
    )
    formation = FormationParams.from_theta(mean, sigma_eps_vec=sigma)
    z_star = model.z_star.copy()
    return RobustScoreResult(
        z_robust=zeta_mean, eps_corrected=z_star - zeta_mean, formation=formation, chains=diag,
        z_star=z_star, posterior_sd=sd, draws=draws, score_sd=np.sqrt(zeta_var),
    )
