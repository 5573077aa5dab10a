import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfgraph.graph import ATTR_WIDTH, FeatureGraph
from mfgraph.synthetic import make_records

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(rng, n, width=ATTR_WIDTH, extra_edges=None, label=None):
    """Connected random graph: a random spanning tree plus extra edges."""
    edges = set()
    order = rng.permutation(n)
    for i in range(1, n):
        a, b = int(order[i]), int(order[rng.integers(0, i)])
        edges.add((min(a, b), max(a, b)))
    extra = n if extra_edges is None else extra_edges
    for _ in range(extra):
        a, b = rng.integers(0, n, size=2)
        if a != b:
            edges.add((int(min(a, b)), int(max(a, b))))
    return FeatureGraph(
        node_types=["G"] * n,
        x=rng.normal(size=(n, width)),
        edges=np.array(sorted(edges), dtype=np.int64).reshape(-1, 2),
        label=int(rng.integers(0, 2)) if label is None else label,
    )


@pytest.fixture(scope="session")
def small_records():
    return make_records(40, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
