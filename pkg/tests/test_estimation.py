import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from conftest import random_graph
from econograph.errors import (
    CapabilityError,
    ConstraintError,
    StabilityViolation,
    ValidationError,
)
from econograph.estimation import (
    FitConfig,
    ModelParams,
    fit,
    gradient,
    label_likelihood,
    log_posterior,
    logits_pinned,
    softmax_pinned,
)
from econograph.graph import EconomicGraph, derive_networks
from econograph.netform import DyadicFormationTerm, FormationParams
from econograph.synth import SynthConfig, generate


def _random_params(rng, graph, derived, budget=0.6):
    q, p = graph.q, graph.p
    xi = rng.dirichlet(np.full(q, 3.0))
    d = derived.with_xi(xi)
    share = rng.uniform(0.2, 0.8)
    l1 = budget * share / max(d.rho_Y, 1e-9)
    l2 = budget * (1 - share) / max(d.rho_S, 1e-9)
    return ModelParams(lambda1=l1, lambda2=l2, alpha=rng.normal(), beta=rng.normal(size=p),
                       a=rng.uniform(0.5, 2.0), b=rng.normal(), sigma_eps=rng.uniform(0.7, 1.5), xi=xi)


def _pack(params, eps):
    return np.concatenate([[params.lambda1, params.lambda2, params.alpha], params.beta,
                           [params.a, params.b], logits_pinned(params.xi), eps])


def _unpack(v, params, p, q):
    k = 3 + p
    return ModelParams(lambda1=v[0], lambda2=v[1], alpha=v[2], beta=v[3:k], a=v[k], b=v[k + 1],
                       sigma_eps=params.sigma_eps, xi=softmax_pinned(v[k + 2:k + 1 + q])), v[k + 1 + q:]


def fd_gradient_check(seed, n=20, step=1e-6):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n=n, m=int(1.5 * n), q=3, p=3, density=0.1, h_density=0.08)
    d = derive_networks(g)
    params = _random_params(rng, g, d)
    eps = rng.normal(size=n)
    analytic = gradient(params, eps, g, d).vector()
    v0 = _pack(params, eps)

    def f(v):
        pr, e = _unpack(v, params, g.p, g.q)
        return log_posterior(pr, e, g, d)

    numeric = np.empty_like(v0)
    for k in range(v0.size):
        e = np.zeros_like(v0)
        e[k] = step
        numeric[k] = (f(v0 + e) - f(v0 - e)) / (2 * step)
    return analytic, numeric


class TestModelParams:
    def test_simplex_enforced(self):
        with pytest.raises(ConstraintError):
            ModelParams(0.1, 0.1, 0.0, [1.0], xi=[0.5, 0.6])

    def test_negative_slope_rejected(self):
        with pytest.raises(ConstraintError):
            ModelParams(0.1, 0.1, 0.0, [1.0], a=-1.0)

    def test_sigma_positive(self):
        with pytest.raises(ConstraintError):
            ModelParams(0.1, 0.1, 0.0, [1.0], sigma_eps=0.0)

    def test_dict_round_trip(self):
        p = ModelParams(0.1, 0.2, 0.3, [1.0, -2.0], a=1.5, b=-0.5, xi=[0.25, 0.75])
        q = ModelParams.from_dict(p.as_dict())
        assert q.as_dict() == p.as_dict()

    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=6))
    def test_softmax_round_trip(self, logits):
        xi = softmax_pinned(logits)
        np.testing.assert_allclose(xi.sum(), 1.0, atol=1e-12)
        if xi.min() > 1e-300:
            np.testing.assert_allclose(logits_pinned(xi), logits, atol=1e-8)


class TestFitConfig:
    @pytest.mark.parametrize("kwargs", [
        {"sigma_eps": 0.0}, {"max_iter": 0}, {"grad_tol": -1.0}, {"method": "bfgs"},
        {"xi_concentration": 0.5}, {"a_init": 0.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            FitConfig(**kwargs)


class TestLabelLikelihood:
    def test_symmetric_point(self):
        r = label_likelihood(np.array([0.0, 0.0]), np.array([1.0, 0.0]), 1.0, 0.0)
        np.testing.assert_allclose(r.prob, 0.5)
        np.testing.assert_allclose(r.loglik, 2 * np.log(0.5))

    def test_log_three(self):
        r = label_likelihood(np.array([np.log(3.0)]), np.array([1.0]), 1.0, 0.0)
        np.testing.assert_allclose(r.prob, [0.75], rtol=1e-15)
        np.testing.assert_allclose(r.loglik, np.log(0.75), rtol=1e-14)

    def test_naive_oracle(self, rng):
        z = rng.normal(size=200) * 3
        x = (rng.random(200) < 0.5).astype(float)
        a, b = 1.7, -0.4
        p1 = 1.0 / (1.0 + np.exp(-(a * z + b)))
        naive = sum(np.log(p1[i]) if x[i] else np.log(1 - p1[i]) for i in range(200))
        np.testing.assert_allclose(label_likelihood(z, x, a, b).loglik, naive, rtol=1e-12)

    def test_extreme_arguments_finite(self):
        z = np.array([700.0, -700.0])
        r = label_likelihood(z, np.array([0.0, 1.0]), 1.0, 0.0)
        assert np.isfinite(r.loglik)
        np.testing.assert_allclose(r.loglik, -1400.0)


class TestLogPosterior:
    def _graph(self, rng, n=6):
        return random_graph(rng, n=n, m=9, q=2, p=2)

    def test_zero_errors_zero_slope(self, rng):
        g = self._graph(rng)
        params = ModelParams(0.05, 0.02, 0.3, [1.0, -1.0], a=0.0, b=0.0, sigma_eps=1.3, xi=[0.5, 0.5])
        val = log_posterior(params, np.zeros(g.n), g)
        np.testing.assert_allclose(val, g.n * np.log(0.5) - g.n * np.log(np.sqrt(2 * np.pi) * 1.3))

    def test_doubling_errors_quadruples_penalty(self, rng):
        g = self._graph(rng)
        params = ModelParams(0.0, 0.0, 0.0, [0.0, 0.0], a=0.0, xi=[0.5, 0.5])
        eps = rng.normal(size=g.n)
        base = log_posterior(params, np.zeros(g.n), g)
        p1 = log_posterior(params, eps, g) - base
        p2 = log_posterior(params, 2 * eps, g) - base
        np.testing.assert_allclose(p2, 4 * p1)

    def test_hand_instance(self):
        # three communities on a path, one link type
        H = np.array([[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1]])
        F = [np.array([[0, 0, 0, 1], [0, 0, 0, 0], [0, 0, 0, 0], [1, 0, 0, 0]])]
        A = np.array([[1.0], [0.0], [-1.0]])
        g = EconomicGraph(H, F, A, [1, 0, 1])
        params = ModelParams(0.2, 0.1, 0.5, [2.0], a=1.5, b=-0.2, sigma_eps=0.8, xi=[1.0])
        eps = np.array([0.3, -0.1, 0.2])
        Y = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
        S = np.array([[0, 0, 1], [0, 0, 0], [1, 0, 0]], dtype=float)
        z = np.linalg.inv(np.eye(3) - 0.2 * Y - 0.1 * S) @ (A[:, 0] * 2.0 + 0.5 + eps)
        prob1 = 1 / (1 + np.exp(-(1.5 * z - 0.2)))
        lik = np.log(prob1[0]) + np.log(1 - prob1[1]) + np.log(prob1[2])
        dens = np.sum(np.log(np.exp(-eps ** 2 / (2 * 0.64)) / (np.sqrt(2 * np.pi) * 0.8)))
        np.testing.assert_allclose(log_posterior(params, eps, g), lik + dens, rtol=1e-12)

    def test_unstable_propagates(self, rng):
        g = self._graph(rng)
        params = ModelParams(5.0, 0.0, 0.0, [0.0, 0.0], xi=[0.5, 0.5])
        with pytest.raises(StabilityViolation):
            log_posterior(params, np.zeros(g.n), g)

    def test_requires_labels(self, rng):
        g = random_graph(rng, labels=False)
        with pytest.raises(ValidationError):
            log_posterior(ModelParams(0.0, 0.0, 0.0, np.zeros(g.p)), np.zeros(g.n), g)


class TestGradient:
    def test_epsilon_at_zero_slope(self, rng):
        g = random_graph(rng, n=10, m=14, q=2, p=2)
        params = ModelParams(0.01, 0.001, 0.2, [0.5, 0.5], a=0.0, b=0.3, sigma_eps=1.7, xi=[0.4, 0.6])
        eps = rng.normal(size=g.n)
        np.testing.assert_allclose(gradient(params, eps, g).epsilon, -eps / 1.7 ** 2, rtol=1e-14)

    def test_lambda2_zero_without_social(self, rng):
        H = (rng.random((8, 10)) < 0.3).astype(float)
        H[np.arange(8), np.arange(8)] = 1.0
        g = EconomicGraph(H, [sp.csr_matrix((10, 10))], rng.normal(size=(8, 2)),
                          (rng.random(8) < 0.5).astype(float))
        params = ModelParams(0.05, 0.3, 0.1, [1.0, -1.0], xi=[1.0])
        assert gradient(params, rng.normal(size=8), g).lambda2 == 0.0

    def test_matches_finite_differences(self):
        analytic, numeric = fd_gradient_check(0)
        scale = np.maximum(np.abs(numeric), 1.0)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-5

    @given(st.integers(0, 2**31 - 1), st.integers(5, 40))
    def test_property_finite_differences(self, seed, n):
        analytic, numeric = fd_gradient_check(seed, n=n)
        scale = np.maximum(np.abs(numeric), 1.0)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-5


def _small_synth(seed, n=300, lambda1=0.2, lambda2=0.1, signal=1.5):
    return generate(SynthConfig(n=n, p=5, q=4, seed=seed, lambda1=lambda1, lambda2=lambda2,
                                signal=signal))


@pytest.fixture(scope="module")
def fitted():
    g, truth = _small_synth(1)
    d = derive_networks(g)
    return g, d, truth, fit(g, derived=d)


class TestFit:
    def test_converged_and_monotone(self, fitted):
        _, _, _, r = fitted
        assert r.converged
        assert np.all(np.diff(r.trace) >= -1e-9)
        np.testing.assert_allclose(r.trace[-1], r.log_posterior)

    def test_iterates_stable_and_on_simplex(self, fitted):
        g, d, _, r = fitted
        np.testing.assert_allclose(r.params.xi.sum(), 1.0, atol=1e-12)
        assert np.all(r.params.xi > 0)
        dd = d.with_xi(r.params.xi)
        assert abs(r.params.lambda1) * dd.rho_Y + abs(r.params.lambda2) * dd.rho_S < 1.0

    def test_refit_from_optimum_is_fixed_point(self, fitted):
        g, d, _, r = fitted
        r2 = fit(g, derived=d, init=r)
        assert abs(r2.log_posterior - r.log_posterior) < 1e-8

    def test_label_separation(self, fitted):
        g, _, _, r = fitted
        x = g.labels.astype(bool)
        assert r.z_star[x].mean() > r.z_star[~x].mean()

    def test_epsilon_consistent_with_scores(self, fitted):
        g, d, _, r = fitted
        S = d.with_xi(r.params.xi).social
        resid = (r.z_star - r.params.lambda1 * (d.association @ r.z_star)
                 - r.params.lambda2 * (S @ r.z_star) - g.attributes @ r.params.beta
                 - r.params.alpha - r.epsilon_hat)
        np.testing.assert_allclose(resid, 0.0, atol=1e-10)

    def test_fix_lambda2(self, fitted):
        g, d, _, _ = fitted
        r = fit(g, FitConfig(fix_lambda2=True), derived=d)
        assert r.params.lambda2 == 0.0

    def test_fix_xi(self, fitted):
        g, d, _, _ = fitted
        r = fit(g, FitConfig(fix_xi=True), derived=d)
        np.testing.assert_allclose(r.params.xi, d.xi)

    def test_map_method_runs(self, fitted):
        g, d, _, _ = fitted
        r = fit(g, FitConfig(method="map"), derived=d)
        assert np.all(np.diff(r.trace) >= -1e-9)

    def test_iteration_cap_flags_not_converged(self, fitted):
        g, d, _, _ = fitted
        r = fit(g, FitConfig(max_iter=1), derived=d)
        assert not r.converged

    def test_requires_labels(self, rng):
        with pytest.raises(ValidationError):
            fit(random_graph(rng, labels=False))

    def test_formation_needs_laplace(self, fitted):
        g, d, _, _ = fitted
        with pytest.raises(ValidationError):
            fit(g, FitConfig(method="map"), derived=d, formation=FormationParams())

    def test_formation_size_limit(self, monkeypatch, fitted):
        from econograph import estimation

        g, d, _, _ = fitted
        monkeypatch.setattr(estimation, "LOGDET_DENSE_LIMIT", 100)
        with pytest.raises(CapabilityError):
            fit(g, derived=d, formation=FormationParams())

    def test_no_network_signal(self):
        l1, l2 = [], []
        for seed in range(10):
            g, _ = _small_synth(seed, n=400, lambda1=0.0, lambda2=0.0, signal=3.0)
            r = fit(g)
            l1.append(r.params.lambda1)
            l2.append(r.params.lambda2)
        assert abs(np.median(l1)) <= 0.05
        assert abs(np.median(l2)) <= 0.05


class TestFormationTerm:
    @pytest.fixture
    def term(self):
        rng = np.random.default_rng(4)
        n = 12
        Y = np.triu((rng.random((n, n)) < 0.3).astype(float), 1)
        Y = sp.csr_matrix(Y + Y.T)
        A = rng.normal(size=(n, 3))
        params = FormationParams(eta=[-1.0, 0.0, 0.4], rho=0.3, w=-0.8)
        return DyadicFormationTerm(A, Y, params), rng.normal(size=n)

    def test_gradient_fd(self, term):
        t, z = term
        h = 1e-6
        num = np.array([(t.value(z + h * e) - t.value(z - h * e)) / (2 * h) for e in np.eye(z.size)])
        np.testing.assert_allclose(t.gradient(z), num, rtol=1e-6, atol=1e-7)

    def test_hessian_fd(self, term):
        t, z = term
        h = 1e-6
        num = np.array([(t.gradient(z + h * e) - t.gradient(z - h * e)) / (2 * h)
                        for e in np.eye(z.size)])
        np.testing.assert_allclose(t.hessian(z), -num, rtol=1e-5, atol=1e-6)

    def test_fisher_curvature_psd(self, term):
        t, z = term
        assert np.linalg.eigvalsh(t.curvature(z)).min() >= -1e-10

    def test_value_is_pairwise_loglik(self):
        rng = np.random.default_rng(9)
        n = 7
        Y = np.triu((rng.random((n, n)) < 0.4).astype(float), 1)
        Y = Y + Y.T
        A = rng.normal(size=(n, 2))
        z = rng.normal(size=n)
        t = DyadicFormationTerm(A, Y, FormationParams(eta=[-1.0, 0.0, 0.4], rho=0.3, w=-0.8),
                                smoothing=0.1)
        Z = (A - A.mean(axis=0)) / A.std(axis=0)
        ll = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                d = z[i] - z[j]
                logit = (-2.0 - 0.8 * np.linalg.norm(Z[i] - Z[j]) + 0.3 * (z[i] + z[j])
                         - 1.6 * (np.sqrt(d * d + 0.01) - 0.1))
                p1 = 1.0 / (1.0 + np.exp(-logit))
                ll += np.log(p1) if Y[i, j] else np.log(1.0 - p1)
        np.testing.assert_allclose(t.value(z), ll, rtol=1e-12)
