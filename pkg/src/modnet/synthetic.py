"""Random ground-truth module networks and forward sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .initialization import ConfigError
from .model import (CycleError, Dataset, ModuleAssignment, ModuleNetwork, build_module_graph,
                    default_names, find_cycle)
from .scoring import StateError
from .tree import Leaf, LeafParams, RegressionTree, Split

_PILOT_ROWS = 2000


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape of a random ground-truth network.

    Module 0 is the parentless root; every other module draws between
    ``min_parents`` and ``max_parents`` parents from variables of
    lower-numbered modules and tests them in a tree of depth
    ``min_depth..max_depth``.  Leaf variances are drawn from
    ``variance_range`` and multiplied by ``noise_scale ** 2``.
    """

    n: int = 100
    K_true: int = 10
    min_parents: int = 1
    max_parents: int = 3
    min_depth: int = 1
    max_depth: int = 2
    mean_range: tuple = (-2.0, 2.0)
    variance_range: tuple = (0.1, 0.5)
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.K_true < 1:
            raise ConfigError("n and K_true must be >= 1")
        if self.K_true > self.n:
            raise ConfigError(f"K_true={self.K_true} modules cannot be filled by n={self.n} variables")
        if not 1 <= self.min_parents <= self.max_parents:
            raise ConfigError("need 1 <= min_parents <= max_parents")
        if not 1 <= self.min_depth <= self.max_depth:
            raise ConfigError("need 1 <= min_depth <= max_depth")
        if self.min_parents > 2 ** self.max_depth - 1:
            raise ConfigError(f"a tree of depth {self.max_depth} has at most "
                              f"{2 ** self.max_depth - 1} tests, fewer than min_parents={self.min_parents}")
        lo, hi = self.variance_range
        if not 0 < lo <= hi:
            raise ConfigError("variance_range must be positive and ordered")
        if self.mean_range[0] > self.mean_range[1]:
            raise ConfigError("mean_range must be ordered")
        if not self.noise_scale > 0:
            raise ConfigError("noise_scale must be > 0")
        # the root alone must supply module 1's parents; every other module needs a variable
        if self.K_true > 1 and self.n < self.min_parents + self.K_true - 1:
            raise ConfigError(
                f"unsatisfiable: module 1 needs {self.min_parents} upstream parents, so the root needs "
                f"{self.min_parents} variables plus one per remaining module "
                f"({self.min_parents + self.K_true - 1} > n={self.n})")


def _random_sizes(spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    sizes = np.ones(spec.K_true, dtype=np.int64)
    if spec.K_true > 1:
        sizes[0] = spec.min_parents
    extra = spec.n - sizes.sum()
    sizes += np.bincount(rng.integers(0, spec.K_true, size=extra), minlength=spec.K_true)
    return sizes


def _grow_tree(rng, spec, parents, depth, pilot, mask) -> tuple[list, list]:
    """Complete tree of ``depth`` testing each of ``parents`` at least once.

    Thresholds sit at random quantiles (0.3..0.7) of the pilot rows that
    reach each node, so no leaf is nearly empty.
    """
    interior = 2 ** depth - 1
    tested = list(parents) + list(rng.choice(parents, size=interior - len(parents)))
    tested = [int(v) for v in rng.permutation(tested)]
    nodes: list = []
    leaf_rows: list = []

    def build(d, rows):
        idx = len(nodes)
        nodes.append(None)
        if d == depth:
            leaf_rows.append((idx, rows))
            return idx
        var = tested.pop()
        q = rng.uniform(0.3, 0.7)
        col = pilot[rows, var]
        u = float(np.quantile(col, q)) if col.size else 0.0
        go = pilot[:, var] < u
        t = build(d + 1, rows & go)
        f = build(d + 1, rows & ~go)
        nodes[idx] = Split(var, u, t, f)
        return idx

    build(0, mask)
    return nodes, leaf_rows


def generate_truth(spec: GeneratorSpec) -> ModuleNetwork:
    rng = np.random.default_rng(spec.seed)
    sizes = _random_sizes(spec, rng)
    labels = rng.permutation(np.repeat(np.arange(spec.K_true), sizes))
    pilot = np.zeros((_PILOT_ROWS, spec.n))
    trees = []
    for j in range(spec.K_true):
        members = np.flatnonzero(labels == j)
        upstream = np.flatnonzero(labels < j)
        if j == 0:
            leaves = [(0, np.ones(_PILOT_ROWS, dtype=bool))]
            nodes = [None]
        else:
            depth = int(rng.integers(spec.min_depth, spec.max_depth + 1))
            hi = min(spec.max_parents, upstream.size, 2 ** depth - 1)
            if hi < spec.min_parents:
                depth = spec.max_depth
                hi = min(spec.max_parents, upstream.size, 2 ** depth - 1)
            if hi < spec.min_parents:
                raise ConfigError(f"module {j} cannot get {spec.min_parents} parents")
            count = int(rng.integers(spec.min_parents, hi + 1))
            parents = np.sort(rng.choice(upstream, size=count, replace=False))
            nodes, leaves = _grow_tree(rng, spec, parents, depth, pilot,
                                       np.ones(_PILOT_ROWS, dtype=bool))
        for idx, rows in leaves:
            mean = float(rng.uniform(*spec.mean_range))
            var = float(rng.uniform(*spec.variance_range)) * spec.noise_scale ** 2
            nodes[idx] = Leaf(LeafParams(mean, var))
            k = int(rows.sum())
            pilot[np.ix_(np.flatnonzero(rows), members)] = (
                mean + np.sqrt(var) * rng.standard_normal((k, members.size)))
        trees.append(RegressionTree(tuple(nodes), 0))
    assignment = ModuleAssignment(tuple(int(a) for a in labels), spec.K_true)
    return ModuleNetwork(assignment, tuple(trees), default_names(spec.n))


def module_order(net: ModuleNetwork) -> list[int]:
    """Topological order of the module graph, lowest index first among ready modules."""
    g = build_module_graph(net)
    cycle = find_cycle(g)
    if cycle is not None:
        raise CycleError(cycle)
    indeg = [0] * net.K
    for _, b in g.edges:
        indeg[b] += 1
    succ = g.successors()
    ready = sorted(j for j in range(net.K) if indeg[j] == 0)
    order = []
    while ready:
        j = ready.pop(0)
        order.append(j)
        for k in succ[j]:
            indeg[k] -= 1
            if indeg[k] == 0:
                ready.append(k)
                ready.sort()
    return order


def sample(net: ModuleNetwork, count: int, seed: int | None = 0) -> Dataset:
    """Forward-sample ``count`` instances, module by module in topological order.

    Every member of a module is drawn from the Gaussian at the leaf its
    instance reaches; parents are always already sampled because they live
    in upstream modules.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    order = module_order(net)
    for j, tree in enumerate(net.trees):
        if net.members(j) and not tree.has_params():
            raise StateError(f"module {j} has leaves without parameters")
    rng = np.random.default_rng(seed)
    x = np.zeros((count, net.n))
    for j in order:
        members = list(net.members(j))
        if not members:
            continue
        tree = net.trees[j]
        leaf = tree.route(x)
        size = len(tree.nodes)
        mean = np.zeros(size)
        sd = np.ones(size)
        for l in tree.leaves():
            p = tree.nodes[l].params
            mean[l], sd[l] = p.mean, np.sqrt(p.variance)
        z = rng.standard_normal((count, len(members)))
        x[:, members] = mean[leaf][:, None] + sd[leaf][:, None] * z
    names = net.var_names if net.var_names is not None else default_names(net.n)
    return Dataset(x, names, net.standardization)
