import numpy as np
import pytest

from soupkit.gnn import ModelSpec, init_params
from soupkit.graph import generate_sbm

# lines recorded by test_acceptance.report(); echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_graph():
    """20-node SBM with a usable validation split."""
    return generate_sbm(20, 3, 0.5, 0.05, 6, 0.6, seed=5)


@pytest.fixture(scope="session")
def sbm1000():
    return generate_sbm(1000, 7, 0.02, 0.002, 64, 0.3, seed=1)


def random_members(graph, n, arch="gcn", seed=0, hidden=8, scale=1.0):
    spec = ModelSpec(arch, 2, graph.feat_dim, hidden, graph.num_classes, 0.0)
    out = []
    for i in range(n):
        p = init_params(spec, seed + i)
        for t in p.tensors():
            t.data = (t.data * scale + (np.random.default_rng(seed * 100 + i).normal(0, 0.1, t.shape))).astype(np.float32)
        out.append(p)
    return out
