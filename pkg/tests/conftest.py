import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import HealthCheck, settings

from econograph.graph import EconomicGraph

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_symmetric_binary(rng, m, density):
    upper = np.triu(rng.random((m, m)) < density, k=1)
    return (upper | upper.T).astype(float)


def random_graph(rng, n=8, m=12, q=2, p=3, labels=True, density=0.3, h_density=0.25):
    """Small valid economic graph: every community gets at least one entity."""
    H = (rng.random((n, m)) < h_density).astype(float)
    for i in range(n):
        if not H[i].any():
            H[i, rng.integers(m)] = 1.0
    F = [random_symmetric_binary(rng, m, density) for _ in range(q)]
    A = rng.standard_normal((n, p))
    x = (rng.random(n) < 0.5).astype(float) if labels else None
    return EconomicGraph(sp.csr_matrix(H), [sp.csr_matrix(f) for f in F], A, x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def report(number, passed, detail):
    """Record one acceptance criterion outcome for the terminal summary."""
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
