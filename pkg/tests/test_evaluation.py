import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from econograph.errors import ConvergenceError, ValidationError
from econograph.evaluation import (
    baseline_lnp,
    baseline_logistic,
    combined_network,
    fit_logistic,
    idm,
    top_order,
)


def idm_bruteforce(u, v):
    """Materialises every top-j set; ties go to the smaller index."""
    n = len(u)
    rank = lambda z: sorted(range(n), key=lambda i: (-z[i], i))  # noqa: E731
    ru, rv = rank(list(u)), rank(list(v))
    terms = []
    for j in range(1, n + 1):
        a, b = set(ru[:j]), set(rv[:j])
        terms.append(len(a ^ b) / (2 * j))
    return sum(terms) / (2 * n), np.array(terms)


vectors = st.integers(1, 30).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(-5, 5), min_size=n, max_size=n),
        st.lists(st.integers(-5, 5), min_size=n, max_size=n),
    )
)


class TestIdm:
    def test_identical_rankings(self, rng):
        z = rng.standard_normal(20)
        assert idm(z, z).idm == 0.0

    def test_two_element_swap(self):
        r = idm([1.0, 2.0], [2.0, 1.0])
        np.testing.assert_allclose(r.per_j, [1.0, 0.0])
        np.testing.assert_allclose(r.idm, 0.25)

    def test_matches_bruteforce_n10(self, rng):
        u, v = rng.permutation(10), rng.permutation(10)
        value, terms = idm_bruteforce(u, v)
        r = idm(u, v)
        np.testing.assert_allclose(r.per_j, terms, rtol=0, atol=1e-15)
        np.testing.assert_allclose(r.idm, value, rtol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            idm([1.0, 2.0], [1.0])

    def test_tie_break_by_index(self):
        np.testing.assert_array_equal(top_order([1.0, 3.0, 3.0, 0.0]), [1, 2, 0, 3])

    @given(vectors)
    def test_property_bruteforce_with_ties(self, pair):
        u, v = pair
        value, terms = idm_bruteforce(u, v)
        r = idm(u, v)
        np.testing.assert_allclose(r.per_j, terms, atol=1e-15)
        np.testing.assert_allclose(r.idm, value, atol=1e-15)

    @given(vectors)
    def test_symmetry_and_range(self, pair):
        u, v = pair
        a, b = idm(u, v), idm(v, u)
        np.testing.assert_allclose(a.idm, b.idm, atol=1e-15)
        assert 0.0 <= a.idm < 1.0
        assert a.per_j[-1] == 0.0
        np.testing.assert_allclose(a.idm, a.per_j.sum() / (2 * len(u)))

    @given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=30, unique=True),
           st.integers(0, 2**31 - 1))
    def test_monotone_invariance(self, values, seed):
        u = np.array(values, dtype=float) / 100
        v = np.random.default_rng(seed).permutation(u.size).astype(float)
        np.testing.assert_allclose(idm(np.exp(u) + 3.0 * u, v).idm, idm(u, v).idm, atol=1e-15)

    @given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=30, unique=True))
    def test_zero_iff_same_ranking(self, values):
        u = np.array(values, dtype=float)
        assert idm(u, 2 * u + 1).idm == 0.0
        assert idm(u, -u).idm > 0.0


class TestBaselineLogistic:
    def test_separable_1d_ordering(self):
        a = np.linspace(-2, 2, 21)
        x = (a > 0).astype(float)
        scores, fit = baseline_logistic(a[:, None], x)
        np.testing.assert_array_equal(np.argsort(scores), np.argsort(a))
        assert fit.coef[0] > 0

    def test_random_labels_small_slope(self):
        rng = np.random.default_rng(7)
        A = rng.standard_normal((10_000, 3))
        x = (rng.random(10_000) < 0.5).astype(float)
        fit = fit_logistic(A, x)
        assert fit.converged
        assert np.all(np.abs(fit.coef) < 0.1)

    def test_recovers_logistic_coefficients(self):
        rng = np.random.default_rng(8)
        A = rng.standard_normal((20_000, 2))
        w = np.array([1.5, -0.7])
        x = (rng.random(20_000) < 1 / (1 + np.exp(-(A @ w + 0.3)))).astype(float)
        fit = fit_logistic(A, x)
        np.testing.assert_allclose(fit.coef, w, atol=0.1)
        np.testing.assert_allclose(fit.intercept, 0.3, atol=0.1)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            fit_logistic(np.zeros((3, 1)), np.zeros(2))


class TestBaselineLnp:
    def test_mix_zero_returns_labels(self, rng):
        x = (rng.random(6) < 0.5).astype(float)
        W = combined_network(sp.random(6, 6, density=0.5, random_state=1), sp.eye(6))
        np.testing.assert_array_equal(baseline_lnp(W, x, mix=0.0), x)

    def test_disconnected_cliques(self):
        block = np.ones((3, 3)) - np.eye(3)
        Y = sp.block_diag([block, block]).tocsr()
        W = combined_network(Y, Y)
        x = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(baseline_lnp(W, x, mix=0.9), x, atol=1e-7)

    def test_closed_form(self, rng):
        Y = np.triu((rng.random((5, 5)) < 0.6).astype(float), 1)
        Y = Y + Y.T
        S = np.triu(rng.random((5, 5)), 1)
        S = S + S.T
        W = combined_network(Y, S)
        x = np.array([1.0, 0.0, 1.0, 0.0, 0.0])
        expected = np.linalg.solve(np.eye(5) - 0.9 * W.toarray(), 0.1 * x)
        np.testing.assert_allclose(baseline_lnp(W, x, mix=0.9, tol=1e-13), expected, atol=1e-11)

    def test_combined_rows_stochastic(self, rng):
        Y = sp.csr_matrix(np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], dtype=float))
        S = sp.csr_matrix(np.array([[0, 2, 0], [2, 0, 0], [0, 0, 0]], dtype=float))
        W = combined_network(Y, S).toarray()
        np.testing.assert_allclose(W.sum(axis=1), [1.0, 1.0, 0.5])

    def test_mix_out_of_range(self):
        with pytest.raises(ValidationError):
            baseline_lnp(sp.eye(2), np.zeros(2), mix=1.5)

    def test_nonconvergence(self):
        W = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        with pytest.raises(ConvergenceError):
            baseline_lnp(W, np.array([1.0, 0.0]), mix=1.0, max_iter=50)
