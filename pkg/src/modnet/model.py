"""Module-network data model, module graph and ground Bayesian network."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tree import RegressionTree


class StructureError(ValueError):
    """Inconsistent module count, variable index or template shape."""


class CycleError(StructureError):
    """The module graph has a directed cycle; ``cycle`` lists its modules."""

    def __init__(self, cycle: Sequence[int], message: str | None = None):
        self.cycle = list(cycle)
        super().__init__(message or "module graph is cyclic: "
                         + " -> ".join(str(j) for j in self.cycle + self.cycle[:1]))


@dataclass(frozen=True)
class Standardization:
    """Per-column affine transform ``z = (x - mean) / scale``."""

    mean: tuple
    scale: tuple

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))
        if len(self.mean) != len(self.scale):
            raise ValueError("mean and scale lengths differ")
        if any(not s > 0 for s in self.scale):
            raise ValueError("scales must be positive")

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - np.asarray(self.mean)) / np.asarray(self.scale)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float) * np.asarray(self.scale) + np.asarray(self.mean)


@dataclass(frozen=True, eq=False)
class Dataset:
    """``M x n`` matrix of finite reals, one row per instance."""

    values: np.ndarray
    var_names: tuple
    standardization: Standardization | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, order="C")
        if values.ndim != 2:
            raise ValueError(f"dataset must be 2-D, got shape {values.shape}")
        m, n = values.shape
        if m < 1 or n < 1:
            raise ValueError(f"dataset needs M >= 1 and n >= 1, got {values.shape}")
        if not np.isfinite(values).all():
            r, c = np.argwhere(~np.isfinite(values))[0]
            raise ValueError(f"non-finite value at row {r}, column {c}")
        names = tuple(str(v) for v in self.var_names)
        if len(names) != n:
            raise ValueError(f"{len(names)} names for {n} columns")
        if any(not s for s in names):
            raise ValueError("variable names must be non-empty")
        if len(set(names)) != n:
            dup = sorted({s for s in names if names.count(s) > 1})
            raise ValueError(f"duplicate variable names: {dup}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "var_names", names)

    @classmethod
    def from_array(cls, values, var_names: Sequence[str] | None = None) -> "Dataset":
        values = np.asarray(values, dtype=float)
        if var_names is None:
            var_names = default_names(values.shape[1])
        return cls(values, tuple(var_names))

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def rows(self, idx) -> "Dataset":
        return Dataset(self.values[np.asarray(idx)], self.var_names, self.standardization)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.var_names == other.var_names
                and self.values.shape == other.values.shape
                and bool(np.array_equal(self.values, other.values))
                and self.standardization == other.standardization)


def default_names(n: int) -> tuple:
    return tuple(f"X{i}" for i in range(n))


@dataclass(frozen=True)
class ModuleAssignment:
    """Map from variable index to module index in ``0..K-1``.

    Range is not enforced here so that :func:`validate` can report it.
    """

    assign: tuple
    K: int

    def __post_init__(self):
        object.__setattr__(self, "assign", tuple(int(a) for a in self.assign))
        object.__setattr__(self, "K", int(self.K))
        if self.K < 1:
            raise StructureError(f"K must be >= 1, got {self.K}")

    @classmethod
    def identity(cls, n: int) -> "ModuleAssignment":
        return cls(tuple(range(n)), n)

    @property
    def n(self) -> int:
        return len(self.assign)

    def members(self, j: int) -> tuple:
        return tuple(i for i, a in enumerate(self.assign) if a == j)

    def sizes(self) -> list[int]:
        sizes = [0] * self.K
        for a in self.assign:
            if 0 <= a < self.K:
                sizes[a] += 1
        return sizes

    def moved(self, i: int, k: int) -> "ModuleAssignment":
        assign = list(self.assign)
        assign[i] = k
        return ModuleAssignment(tuple(assign), self.K)

    def relabeled(self, perm: Sequence[int]) -> "ModuleAssignment":
        """Module ``j`` becomes ``perm[j]``."""
        return ModuleAssignment(tuple(perm[a] for a in self.assign), self.K)


@dataclass(frozen=True)
class ModuleNetwork:
    """Assignment plus one regression tree per module.

    The parents of module ``j`` are exactly the variables tested in
    ``trees[j]``; there is no separately stored parent set to drift out of
    sync with the trees.
    """

    assignment: ModuleAssignment
    trees: tuple
    var_names: tuple | None = None
    standardization: Standardization | None = field(default=None, compare=True)

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if self.var_names is not None:
            object.__setattr__(self, "var_names", tuple(self.var_names))

    @classmethod
    def from_assignment(cls, assignment: ModuleAssignment, **kwargs) -> "ModuleNetwork":
        return cls(assignment, tuple(RegressionTree.single_leaf() for _ in range(assignment.K)),
                   **kwargs)

    @property
    def K(self) -> int:
        return self.assignment.K

    @property
    def n(self) -> int:
        return self.assignment.n

    def parents(self, j: int) -> frozenset:
        return self.trees[j].tested_vars

    def members(self, j: int) -> tuple:
        return self.assignment.members(j)

    def with_tree(self, j: int, tree: RegressionTree) -> "ModuleNetwork":
        trees = list(self.trees)
        trees[j] = tree
        return ModuleNetwork(self.assignment, tuple(trees), self.var_names, self.standardization)

    def with_trees(self, trees: Iterable[RegressionTree]) -> "ModuleNetwork":
        return ModuleNetwork(self.assignment, tuple(trees), self.var_names, self.standardization)

    def with_assignment(self, assignment: ModuleAssignment) -> "ModuleNetwork":
        return ModuleNetwork(assignment, self.trees, self.var_names, self.standardization)

    def relabeled(self, perm: Sequence[int]) -> "ModuleNetwork":
        """Rename module ``j`` to ``perm[j]`` throughout."""
        trees = [None] * self.K
        for j, t in enumerate(self.trees):
            trees[perm[j]] = t
        return ModuleNetwork(self.assignment.relabeled(perm), tuple(trees),
                             self.var_names, self.standardization)


@dataclass(frozen=True)
class ModuleGraph:
    K: int
    edges: frozenset

    def successors(self) -> list[list[int]]:
        succ = [[] for _ in range(self.K)]
        for a, b in sorted(self.edges):
            succ[a].append(b)
        return succ


@dataclass(frozen=True)
class GroundNetwork:
    """Per-variable unrolling: parents and the (shared) tree of each variable."""

    parents: tuple
    cpds: tuple
    module_of: tuple

    @property
    def n(self) -> int:
        return len(self.parents)

    def edges(self) -> frozenset:
        return frozenset((p, c) for c, ps in enumerate(self.parents) for p in ps)

    def topological_order(self) -> list[int]:
        """Kahn's algorithm, lowest index first among ready variables."""
        import heapq

        indeg = [len(ps) for ps in self.parents]
        children = [[] for _ in range(self.n)]
        for c, ps in enumerate(self.parents):
            for p in ps:
                children[p].append(c)
        ready = [i for i in range(self.n) if indeg[i] == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            i = heapq.heappop(ready)
            order.append(i)
            for c in children[i]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
        if len(order) != self.n:
            raise StructureError("ground network has a directed cycle")
        return order


def _check_shape(net: ModuleNetwork) -> None:
    if len(net.trees) != net.K:
        raise StructureError(f"assignment has K={net.K} but template has {len(net.trees)} trees")
    n = net.n
    for i, a in enumerate(net.assignment.assign):
        if not 0 <= a < net.K:
            raise StructureError(f"variable {i} assigned to module {a}, outside 0..{net.K - 1}")
    for j, tree in enumerate(net.trees):
        bad = [v for v in tree.tested_vars if not 0 <= v < n]
        if bad:
            raise StructureError(f"module {j} tests variable(s) {sorted(bad)} outside 0..{n - 1}")


def module_edges(assign: Sequence[int], parent_sets: Sequence[Iterable[int]]) -> frozenset:
    return frozenset((assign[x], k) for k, ps in enumerate(parent_sets) for x in ps)


def build_module_graph(net: ModuleNetwork) -> ModuleGraph:
    """Edge ``j -> k`` iff some variable assigned to ``j`` is a parent of ``k``."""
    _check_shape(net)
    return ModuleGraph(net.K, module_edges(net.assignment.assign,
                                           [t.tested_vars for t in net.trees]))


def find_cycle(g: ModuleGraph) -> list[int] | None:
    """A directed cycle as a list of modules, or ``None``.  Self-loops count."""
    succ = g.successors()
    WHITE, GREY, BLACK = 0, 1, 2
    color = [WHITE] * g.K
    for start in range(g.K):
        if color[start] != WHITE:
            continue
        path = [start]
        iters = [iter(succ[start])]
        color[start] = GREY
        while iters:
            nxt = next(iters[-1], None)
            if nxt is None:
                color[path.pop()] = BLACK
                iters.pop()
            elif color[nxt] == GREY:
                return path[path.index(nxt):]
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                iters.append(iter(succ[nxt]))
    return None


def check_acyclic(g: ModuleGraph) -> bool:
    return find_cycle(g) is None


def reachable_from(g: ModuleGraph, start: int) -> set[int]:
    """Modules reachable from ``start`` by a non-empty path (``start`` excluded unless on a cycle)."""
    succ = g.successors()
    seen: set[int] = set()
    stack = list(succ[start])
    while stack:
        j = stack.pop()
        if j not in seen:
            seen.add(j)
            stack.extend(succ[j])
    return seen


def ground_network(net: ModuleNetwork) -> GroundNetwork:
    g = build_module_graph(net)
    cycle = find_cycle(g)
    if cycle is not None:
        raise CycleError(cycle)
    parents = tuple(net.parents(a) for a in net.assignment.assign)
    cpds = tuple(net.trees[a] for a in net.assignment.assign)
    return GroundNetwork(parents, cpds, net.assignment.assign)


def validate(net: ModuleNetwork, data=None, declared_parents=None) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid).

    ``declared_parents`` optionally gives a parent set per module (as stored in
    a model file); each must equal the variables tested by that module's tree.
    """
    problems = []
    K = net.K
    if len(net.trees) != K:
        problems.append(f"assignment has K={K} but template has {len(net.trees)} trees")
    n = net.n
    if data is not None and data.n != n:
        problems.append(f"network covers {n} variables but data has {data.n}")
    if net.var_names is not None and len(net.var_names) != n:
        problems.append(f"{len(net.var_names)} variable names for {n} variables")
    if net.var_names is not None and len(set(net.var_names)) != len(net.var_names):
        problems.append("duplicate variable names")
    for i, a in enumerate(net.assignment.assign):
        if not 0 <= a < K:
            problems.append(f"variable {i} assigned to module {a}, outside 0..{K - 1}")
    for j, tree in enumerate(net.trees):
        if not isinstance(tree, RegressionTree):
            problems.append(f"module {j} template is not a RegressionTree")
            continue
        for v in sorted(tree.tested_vars):
            if not 0 <= v < n:
                problems.append(f"module {j} tests variable {v}, outside 0..{n - 1}")
    if declared_parents is not None:
        if len(declared_parents) != len(net.trees):
            problems.append(f"{len(declared_parents)} declared parent sets for {len(net.trees)} modules")
        else:
            problems.extend(declared_parent_violations(net, declared_parents))
    if net.standardization is not None and len(net.standardization.mean) != n:
        problems.append("standardization length does not match variable count")
    if not problems:
        cycle = find_cycle(build_module_graph(net))
        if cycle is not None:
            problems.append("module graph is cyclic: " + " -> ".join(map(str, cycle + cycle[:1])))
    return problems


def declared_parent_violations(net: ModuleNetwork, declared: Sequence[Iterable[int]]) -> list[str]:
    """Compare externally declared parent sets against the trees' tested variables."""
    out = []
    for j, (tree, ps) in enumerate(zip(net.trees, declared)):
        ps = set(ps)
        for v in sorted(tree.tested_vars - ps):
            out.append(f"module {j} tree tests variable {v} which is not a declared parent")
        for v in sorted(ps - tree.tested_vars):
            out.append(f"module {j} declares parent {v} which its tree never tests")
    return out
