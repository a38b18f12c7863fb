from __future__ import annotations

import numpy as np
import pytest

from modnet.model import Dataset, ModuleAssignment, ModuleNetwork
from modnet.scoring import PriorSpec, fit_parameters
from modnet.tree import RegressionTree

# variables of the stock example: MSFT drives INTL/AMAT/MOT, which drive DELL/HPQ
STOCKS = ("MSFT", "INTL", "AMAT", "MOT", "DELL", "HPQ")
MSFT, INTL, AMAT, MOT, DELL, HPQ = range(6)


def stock_network() -> ModuleNetwork:
    """Three modules in a chain; module indices 0, 1, 2 stand for the example's M1, M2, M3."""
    assign = ModuleAssignment((0, 1, 1, 1, 2, 2), 3)
    leaf = RegressionTree.single_leaf()
    m2 = leaf.apply_split(0, MSFT, 0.0)
    m3 = leaf.apply_split(0, AMAT, 0.2)
    m3 = m3.apply_split(m3.nodes[0].false_child, INTL, -0.1)
    return ModuleNetwork(assign, (leaf, m2, m3), STOCKS)


def random_network(rng: np.random.Generator, n: int, K: int, values: np.ndarray | None = None,
                   max_splits: int = 4) -> ModuleNetwork:
    """Acyclic by construction: modules only test variables of modules earlier in a random order."""
    assign = rng.integers(0, K, size=n)
    order = rng.permutation(K)
    rank = np.empty(K, dtype=int)
    rank[order] = np.arange(K)
    trees = []
    for j in range(K):
        upstream = [v for v in range(n) if rank[assign[v]] < rank[j]]
        tree = RegressionTree.single_leaf()
        if upstream:
            for _ in range(int(rng.integers(0, max_splits + 1))):
                leaf = int(rng.choice(tree.leaves()))
                v = int(rng.choice(upstream))
                u = (float(rng.choice(values[:, v])) if values is not None
                     else float(rng.normal()))
                tree = tree.apply_split(leaf, v, u)
        trees.append(tree)
    return ModuleNetwork(ModuleAssignment(tuple(int(a) for a in assign), K), tuple(trees))


def random_prior(rng: np.random.Generator, lambda_s: bool = True) -> PriorSpec:
    return PriorSpec(mu0=float(rng.uniform(-1, 1)), kappa0=float(rng.uniform(0.05, 3)),
                     alpha0=float(rng.uniform(0.5, 4)), beta0=float(rng.uniform(0.2, 3)),
                     lambda_s=float(rng.uniform(0, 2)) if lambda_s else 0.0)


def fitted(net: ModuleNetwork, rng: np.random.Generator, M: int = 40) -> ModuleNetwork:
    data = Dataset.from_array(rng.normal(size=(M, net.n)))
    return fit_parameters(data, net, PriorSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


# filled by the acceptance tests, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
