"""Synthetic economic graphs with known development scores.

The generator draws attributes, memberships and entity social ties, projects
them to community space, draws latent errors, solves for the equilibrium
score and emits noisy binary labels from the logistic link. Optionally the
association network is rewired by the formation model first, so that the
network depends on development strength (selection bias).

Membership and social-degree assignments are balanced across communities
and entities (each receives a near-equal share of the random slots). This
keeps the spectral radii of ``Y`` and ``S`` close to their mean degrees so
moderate diffusion weights stay inside the stability region at any size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .equilibrium import solve_direct, stability_check
from .errors import StabilityViolation, ValidationError
from .estimation import ModelParams
from .graph import EconomicGraph, derive_association, social_slices, spectral_radius

__all__ = ["SynthConfig", "SynthTruth", "generate", "default_true_params", "default_xi"]


def default_xi(q):
    w = np.arange(q, 0, -1, dtype=np.float64)
    return w / w.sum()


def default_true_params(p, q, rng=None, signal=1.5, lambda1=0.2, lambda2=0.1):
    """Ground truth used when a config does not supply one.

    ``beta`` is drawn so that ``A beta`` has standard deviation ``signal``
    for standard normal attributes.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    beta = rng.standard_normal(p)
    beta *= signal / np.linalg.norm(beta)
    return ModelParams(lambda1=lambda1, lambda2=lambda2, alpha=0.0, beta=beta, a=1.0, b=0.0,
                       sigma_eps=1.0, xi=default_xi(q))


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``membership_probs[k]`` is the probability that an entity belongs to
    ``k + 1`` communities; ``mean_degree`` is an entity's expected number of
    social ties summed over all link types. ``true_formation`` (a
    ``FormationParams``) switches on selection-biased rewiring of ``Y``;
    ``formation_score`` picks the score links form on: the fundamentals
    ``A beta + alpha + eps`` (default) or the pre-rewiring equilibrium.
    """

    n: int = 896
    m: int | None = None
    q: int = 4
    p: int = 20
    true_params: ModelParams | None = None
    true_formation: object = None
    label_noise: float = 0.08
    seed: int = 0
    membership_probs: tuple = (0.7, 0.2, 0.1)
    mean_degree: float = 4.0
    signal: float = 1.5
    lambda1: float = 0.2
    lambda2: float = 0.1
    formation_sweeps: float = 10.0
    formation_score: str = "fundamentals"
    max_attempts: int = 10

    def __post_init__(self):
        for name in ("n", "q", "p"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1", invariant=f"{name} >= 1")
        if self.m is not None and self.m < 1:
            raise ValidationError("m must be >= 1", invariant="m >= 1")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValidationError("label_noise must be in [0, 0.5)", invariant="label_noise range")
        probs = np.asarray(self.membership_probs, dtype=float)
        if probs.ndim != 1 or probs.size < 1 or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
            raise ValidationError("membership_probs must be a probability vector",
                                  invariant="membership_probs")
        if self.formation_score not in ("fundamentals", "equilibrium"):
            raise ValidationError("formation_score must be 'fundamentals' or 'equilibrium'",
                                  invariant="formation_score")
        if probs.size > self.n:
            raise ValidationError("membership count exceeds n", invariant="membership_probs")


@dataclass
class SynthTruth:
    z_star: np.ndarray
    epsilon: np.ndarray
    labels_clean: np.ndarray
    params: ModelParams
    formation: object = None
    z_initial: np.ndarray | None = None
    flipped: np.ndarray = field(default=None)


def _balanced(count, n, rng):
    # ids in range(n), each used floor/ceil(count / n) times, in random order
    reps = -(-count // n) if count else 0
    if reps == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:count]


def _affiliation(n, m, probs, rng):
    k = rng.choice(len(probs), size=m, p=probs) + 1
    primary = np.concatenate([rng.permutation(n), rng.integers(0, n, max(0, m - n))])[:m]
    rows, cols = [primary], [np.arange(m)]
    for extra in range(1, len(probs)):
        ents = np.flatnonzero(k > extra)
        rows.append(_balanced(ents.size, n, rng))
        cols.append(ents)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    H = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, m))
    H.data[:] = 1.0
    return H, primary


def _social_slice(m, degree, rng):
    stubs = int(round(m * degree))
    stubs -= stubs % 2
    owners = rng.permutation(_balanced(stubs, m, rng))
    a, b = owners[0::2], owners[1::2]
    keep = a != b
    M = sp.coo_matrix((np.ones(keep.sum()), (a[keep], b[keep])), shape=(m, m)).tocsr()
    M = (M + M.T).tocsr()
    M.data[:] = 1.0
    return M


def _structure(cfg, m, rng):
    H, primary = _affiliation(cfg.n, m, cfg.membership_probs, rng)
    F = [_social_slice(m, cfg.mean_degree / cfg.q, rng) for _ in range(cfg.q)]
    return H, F, primary


def _blend(slices, xi):
    S = slices[0] * xi[0]
    for Sk, w in zip(slices[1:], xi[1:]):
        S = S + Sk * w
    return S.tocsr()


def _bridged_affiliation(primary, n, m, Y):
    """Affiliation realising ``Y`` exactly: primary memberships plus one
    bridge entity per association edge."""
    iu, ju = sp.triu(Y, k=1).nonzero()
    e = iu.size
    rows = np.concatenate([primary, iu, ju])
    cols = np.concatenate([np.arange(m), m + np.arange(e), m + np.arange(e)])
    H = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, m + e))
    H.data[:] = 1.0
    return H


def _pad(F, size):
    F = F.tocoo()
    return sp.csr_matrix((F.data, (F.row, F.col)), shape=(size, size))


def generate(config):
    """Draw an :class:`EconomicGraph` and its ground truth.

    Returns
    -------
    graph : EconomicGraph
        With noisy labels.
    truth : SynthTruth
        Equilibrium score, errors, noise-free labels and true parameters.

    Raises
    ------
    StabilityViolation
        When ``max_attempts`` structural draws all violate the stability
        condition at the true diffusion weights.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n, q, p = cfg.n, cfg.q, cfg.p
    m = cfg.m if cfg.m is not None else n
    params = cfg.true_params
    if params is None:
        params = default_true_params(p, q, rng, cfg.signal, cfg.lambda1, cfg.lambda2)
    if params.beta.size != p:
        raise ValidationError("true beta length differs from p", invariant="dimension p")
    xi = params.xi if params.xi is not None else default_xi(q)
    params = params.replace(xi=xi)
    A = rng.standard_normal((n, p))

    for _attempt in range(cfg.max_attempts):
        H, F, primary = _structure(cfg, m, rng)
        Y = derive_association(H)
        S = _blend(social_slices(F, H), xi)
        rho_Y, rho_S = spectral_radius(Y), spectral_radius(S)
        if stability_check(params.lambda1, params.lambda2, rho_Y, rho_S):
            break
    else:
        raise StabilityViolation(
            f"no stable structure in {cfg.max_attempts} draws "
            f"(last: lambda1*rho(Y) + lambda2*rho(S) = "
            f"{abs(params.lambda1) * rho_Y + abs(params.lambda2) * rho_S:.4g})",
            product=abs(params.lambda1) * rho_Y + abs(params.lambda2) * rho_S,
        )

    eps = params.sigma_eps * rng.standard_normal(n)
    z = solve_direct(Y, S, A, params, eps, rho_Y=rho_Y, rho_S=rho_S).z_star
    z_initial = None
    if cfg.true_formation is not None:
        from .netform import sample_network

        z_initial = z
        if cfg.formation_score == "fundamentals":
            drive = A @ params.beta + params.alpha + eps
        else:
            drive = z
        steps = max(1, int(cfg.formation_sweeps * n * (n - 1) / 2))
        Y_new = sample_network(A, drive, cfg.true_formation, seed=int(rng.integers(2**63 - 1)),
                               n_steps=steps, initial=Y)
        H = _bridged_affiliation(primary, n, m, Y_new)
        F = [_pad(Fk, H.shape[1]) for Fk in F]
        Y = derive_association(H)
        S = _blend(social_slices(F, H), xi)
        rho_Y, rho_S = spectral_radius(Y), spectral_radius(S)
        z = solve_direct(Y, S, A, params, eps, rho_Y=rho_Y, rho_S=rho_S).z_star

    t = params.a * z + params.b
    prob = np.exp(-np.logaddexp(0.0, -t))
    clean = (rng.random(n) < prob).astype(np.float64)
    flipped = rng.random(n) < cfg.label_noise
    labels = np.where(flipped, 1.0 - clean, clean)
    graph = EconomicGraph(H, F, A, labels)
    truth = SynthTruth(
        z_star=z, epsilon=eps, labels_clean=clean, params=params,
        formation=cfg.true_formation, z_initial=z_initial, flipped=flipped,
    )
    return graph, truth
