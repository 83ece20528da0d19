"""Economic graph data model and its projections onto community space.

An economic graph couples ``n`` communities and ``m`` entities through

* an affiliation incidence ``H`` (n x m, binary),
* a stack of ``q`` entity social networks ``F`` (each m x m, binary,
  symmetric, hollow),
* community attributes ``A`` (n x p, real),
* optional binary development labels ``x``.

Two community-level networks are derived from it: the association network
``Y`` (communities sharing at least one entity) and the weighted social
network ``S`` (entity social ties between members, blended over link types).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConstraintError, ConvergenceError, ValidationError

LANCZOS_AFTER = 2000

__all__ = [
    "EconomicGraph",
    "DerivedNetworks",
    "derive_association",
    "aggregate_social",
    "social_slices",
    "derive_networks",
    "spectral_radius",
    "check_simplex",
]

SIMPLEX_TOL = 1e-9


def _as_csr(M, dtype=np.float64):
    if sp.issparse(M):
        out = sp.csr_matrix(M, dtype=dtype, copy=True)
    else:
        out = sp.csr_matrix(np.asarray(M, dtype=dtype))
    out.sum_duplicates()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def _is_binary(M):
    data = M.data if sp.issparse(M) else np.asarray(M).ravel()
    return bool(np.all((data == 0) | (data == 1)))


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EconomicGraph:
    """Validated container for ``(H, F, A, x)``.

    Parameters
    ----------
    affiliation : array_like or sparse, shape (n, m)
        Binary community-by-entity incidence.
    social : sequence of array_like or sparse, each (m, m)
        One binary symmetric hollow adjacency per link type.
    attributes : array_like, shape (n, p)
    labels : array_like, shape (n,), optional
        Binary development categories.

    All inputs are copied; the stored arrays are read-only.
    """

    affiliation: sp.csr_matrix
    social: tuple
    attributes: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        H = _as_csr(self.affiliation)
        social = tuple(_as_csr(F) for F in self.social)
        A = np.array(self.attributes, dtype=np.float64, copy=True)
        if A.ndim == 1:
            A = A[:, None]
        x = None if self.labels is None else np.array(self.labels, dtype=np.float64, copy=True)
        _validate(H, social, A, x)
        A.setflags(write=False)
        if x is not None:
            x.setflags(write=False)
        object.__setattr__(self, "affiliation", H)
        object.__setattr__(self, "social", social)
        object.__setattr__(self, "attributes", A)
        object.__setattr__(self, "labels", x)

    @property
    def n(self):
        return self.affiliation.shape[0]

    @property
    def m(self):
        return self.affiliation.shape[1]

    @property
    def q(self):
        return len(self.social)

    @property
    def p(self):
        return self.attributes.shape[1]

    def with_labels(self, labels):
        return EconomicGraph(self.affiliation, self.social, self.attributes, labels)

    def equals(self, other):
        """Exact structural equality (used by round-trip checks)."""
        if not isinstance(other, EconomicGraph):
            return False
        if (self.n, self.m, self.q, self.p) != (other.n, other.m, other.q, other.p):
            return False
        if (self.affiliation != other.affiliation).nnz:
            return False
        if any((F1 != F2).nnz for F1, F2 in zip(self.social, other.social)):
            return False
        if not np.array_equal(self.attributes, other.attributes):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


def _validate(H, social, A, x):
    n, m = H.shape
    if n < 1:
        raise ValidationError("need at least one community (n >= 1)", invariant="n >= 1")
    if len(social) < 1:
        raise ValidationError("need at least one social link type (q >= 1)", invariant="q >= 1")
    if A.ndim != 2 or A.shape[1] < 1:
        raise ValidationError("attributes must be an n x p matrix with p >= 1", invariant="p >= 1")
    if A.shape[0] != n:
        raise ValidationError(
            f"attributes have {A.shape[0]} rows but affiliation has n={n} communities",
            invariant="dimension n",
        )
    if not np.all(np.isfinite(A)):
        raise ValidationError("attributes contain non-finite values", invariant="finite attributes")
    if not _is_binary(H):
        raise ValidationError("affiliation entries must be 0 or 1", invariant="binary affiliation")
    empty = np.flatnonzero(np.diff(H.indptr) == 0)
    if empty.size:
        raise ValidationError(
            f"no empty communities: community {int(empty[0])} has no members "
            f"({empty.size} empty in total)",
            invariant="no empty communities",
        )
    if m < 1:
        raise ValidationError("need at least one entity (m >= 1)", invariant="m >= 1")
    for k, F in enumerate(social):
        if F.shape != (m, m):
            raise ValidationError(
                f"social slice {k} has shape {F.shape}, expected m x m with m={m}",
                invariant="dimension m",
            )
        if not _is_binary(F):
            raise ValidationError(f"social slice {k} entries must be 0 or 1", invariant="binary social")
        if F.diagonal().any():
            raise ValidationError(f"social slice {k} has self-loops", invariant="zero diagonal")
        if (F != F.T).nnz:
            raise ValidationError(f"social slice {k} is not symmetric", invariant="symmetric social")
    if x is not None:
        if x.shape != (n,):
            raise ValidationError(
                f"labels have shape {x.shape}, expected ({n},)", invariant="dimension n"
            )
        if not np.all((x == 0) | (x == 1)):
            raise ValidationError("labels must be 0 or 1", invariant="binary labels")


def check_simplex(xi, q=None):
    """Validate relation weights and return them as a float array."""
    xi = np.asarray(xi, dtype=np.float64).ravel()
    if q is not None and xi.size != q:
        raise ValidationError(f"xi has length {xi.size}, expected q={q}", invariant="dimension q")
    if np.any(xi <= 0):
        raise ConstraintError(
            f"xi components must be strictly positive, got min {xi.min():.6g}",
            invariant="xi > 0",
        )
    total = xi.sum()
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise ConstraintError(f"xi must sum to 1, sums to {total:.12g}", invariant="sum xi = 1")
    return xi


def derive_association(H):
    """Binary association network: ``Y_ij = 1`` iff ``i != j`` share an entity.

    Parameters
    ----------
    H : array_like or sparse, shape (n, m)

    Returns
    -------
    scipy.sparse.csr_matrix, shape (n, n)
        Symmetric, binary, zero diagonal.
    """
    H = _as_csr(H)
    if not _is_binary(H):
        raise ValidationError("affiliation entries must be 0 or 1", invariant="binary affiliation")
    G = (H @ H.T).tocsr()
    G.setdiag(0)
    G.eliminate_zeros()
    G.data[:] = 1.0
    G.sort_indices()
    return G


def social_slices(F, H):
    """Per-link-type community social counts ``H F^(k) H^T`` with zero diagonal."""
    H = _as_csr(H)
    out = []
    for k, Fk in enumerate(F):
        Fk = _as_csr(Fk)
        if Fk.shape != (H.shape[1], H.shape[1]):
            raise ValidationError(
                f"social slice {k} has shape {Fk.shape}, expected ({H.shape[1]}, {H.shape[1]})",
                invariant="dimension m",
            )
        Sk = (H @ Fk @ H.T).tocsr()
        Sk.setdiag(0)
        Sk.eliminate_zeros()
        Sk.sort_indices()
        out.append(Sk)
    return out


def _blend(slices, xi):
    S = slices[0] * xi[0]
    for Sk, w in zip(slices[1:], xi[1:]):
        S = S + Sk * w
    S = S.tocsr()
    S.sort_indices()
    return S


def aggregate_social(F, H, xi):
    """Weighted community social network ``S = sum_k xi_k H F^(k) H^T``.

    ``xi`` must lie strictly inside the probability simplex. The diagonal
    is zeroed so that ``S`` only carries ties between distinct communities.
    """
    xi = check_simplex(xi, q=len(F))
    return _blend(social_slices(F, H), xi)


def spectral_radius(M, tol=1e-8, max_iter=10_000):
    """Largest absolute eigenvalue of a symmetric matrix by power iteration.

    The estimate at step ``k`` is ``||M v_k||`` for the unit iterate ``v_k``;
    for symmetric ``M`` this increases monotonically to the spectral radius
    even when ``+rho`` and ``-rho`` are both eigenvalues. Iteration stops once
    the extrapolated remaining error (from the ratio of successive changes)
    falls below ``tol / 10`` relative to the estimate.

    Raises
    ------
    ConvergenceError
        After ``max_iter`` steps; ``.last`` holds the final estimate and vector.
    """
    if M.shape[0] != M.shape[1]:
        raise ValidationError(f"matrix must be square, got {M.shape}", invariant="square")
    n = M.shape[0]
    if n == 0:
        return 0.0
    if sp.issparse(M):
        M = M.tocsr()
        if M.nnz == 0:
            return 0.0
    else:
        M = np.asarray(M, dtype=np.float64)
        if not M.any():
            return 0.0
    # positive, non-constant start: never orthogonal to a Perron vector
    v = 1.0 + 0.5 * np.cos(np.arange(n) * 0.7 + 0.3)
    v /= np.linalg.norm(v)
    est = 0.0
    prev_change = None
    for it in range(max_iter):
        w = M @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        change = abs(norm - est)
        est = norm
        v = w / norm
        if change <= 1e-14 * est:
            return est
        if it >= 3 and prev_change > 0:
            ratio = change / prev_change
            # safety factor: the geometric extrapolation is slightly optimistic
            if ratio < 1.0 and change * ratio / (1.0 - ratio) <= 0.1 * tol * est:
                return est
        prev_change = change
        if it + 1 == LANCZOS_AFTER and n > 2:
            break
    if n > 2:
        # clustered top of the spectrum (many similar components): Lanczos
        try:
            vals = spla.eigsh(M, k=1, which="LM", tol=tol, maxiter=max_iter, v0=v,
                              return_eigenvectors=False)
            return float(max(abs(vals[0]), est))
        except spla.ArpackNoConvergence:
            pass
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} steps (estimate {est:.10g})",
        last=(est, v),
    )


@dataclass(frozen=True, eq=False)
class DerivedNetworks:
    """Association and weighted social networks in community space.

    ``slices`` keeps the per-type counts ``H F^(k) H^T`` so that ``S`` can be
    re-blended for new relation weights without touching ``H`` or ``F``.
    """

    association: sp.csr_matrix
    slices: tuple
    xi: np.ndarray
    social: sp.csr_matrix = field(default=None)
    rho_Y: float = field(default=None)
    rho_S: float = field(default=None)

    def __post_init__(self):
        xi = check_simplex(self.xi, q=len(self.slices))
        object.__setattr__(self, "xi", _frozen(xi))
        if self.social is None:
            object.__setattr__(self, "social", _blend(self.slices, xi))
        if self.rho_Y is None:
            object.__setattr__(self, "rho_Y", spectral_radius(self.association))
        if self.rho_S is None:
            object.__setattr__(self, "rho_S", spectral_radius(self.social))

    @property
    def n(self):
        return self.association.shape[0]

    @property
    def q(self):
        return len(self.slices)

    def with_xi(self, xi):
        """Same networks re-blended with new relation weights."""
        return DerivedNetworks(self.association, self.slices, xi, rho_Y=self.rho_Y)

    def with_association(self, Y):
        """Replace ``Y`` (e.g. by a rewired or sampled network)."""
        return DerivedNetworks(_as_csr(Y), self.slices, self.xi, social=self.social, rho_S=self.rho_S)


def derive_networks(graph, xi=None):
    """Project an :class:`EconomicGraph` to community space.

    ``xi`` defaults to uniform relation weights.
    """
    if xi is None:
        xi = np.full(graph.q, 1.0 / graph.q)
    Y = derive_association(graph.affiliation)
    slices = tuple(social_slices(graph.social, graph.affiliation))
    return DerivedNetworks(Y, slices, xi)
