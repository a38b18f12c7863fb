"""Regression-tree conditional probability templates with Gaussian leaves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence, Union

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


class TreeError(ValueError):
    """Raised for malformed trees or misuse of tree operations."""


class MissingValueError(KeyError):
    """A tested variable has no value in the supplied instance."""


@dataclass(frozen=True)
class LeafParams:
    mean: float
    variance: float

    def __post_init__(self):
        if not math.isfinite(self.mean):
            raise TreeError(f"leaf mean must be finite, got {self.mean!r}")
        if not (math.isfinite(self.variance) and self.variance > 0.0):
            raise TreeError(f"leaf variance must be finite and > 0, got {self.variance!r}")


@dataclass(frozen=True)
class Leaf:
    params: LeafParams | None = None


@dataclass(frozen=True)
class Split:
    """Interior node: rows with ``value(var) < threshold`` go to ``true_child``."""

    var: int
    threshold: float
    true_child: int
    false_child: int


Node = Union[Leaf, Split]


class TreeComplexity(NamedTuple):
    leaves: int
    interior: int
    tested_vars: frozenset


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Immutable rooted binary tree of ``U < u`` tests.

    Node indices are stable under :meth:`apply_split`, which appends the two
    fresh leaves.  Equality is structural: two trees are equal when their
    canonical nested forms agree, whatever the internal node numbering.
    """

    nodes: tuple = (Leaf(),)
    root: int = 0
    _canon: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        if not nodes:
            raise TreeError("a tree needs at least one node")
        if not 0 <= self.root < len(nodes):
            raise TreeError(f"root index {self.root} out of range")
        seen = set()
        stack = [self.root]
        while stack:
            i = stack.pop()
            if i in seen:
                raise TreeError(f"node {i} is reachable twice")
            seen.add(i)
            node = nodes[i]
            if isinstance(node, Split):
                if not math.isfinite(node.threshold):
                    raise TreeError(f"node {i} has a non-finite threshold")
                if int(node.var) != node.var or node.var < 0:
                    raise TreeError(f"node {i} tests an invalid variable {node.var!r}")
                kids = (node.true_child, node.false_child)
                if kids[0] == kids[1]:
                    raise TreeError(f"node {i} has identical children")
                for c in kids:
                    if not 0 <= c < len(nodes):
                        raise TreeError(f"node {i} has child {c} out of range")
                stack.extend(kids)
            elif not isinstance(node, Leaf):
                raise TreeError(f"node {i} is neither a Leaf nor a Split: {node!r}")
        if len(seen) != len(nodes):
            raise TreeError("tree has unreachable nodes")
        object.__setattr__(self, "_canon", self._canonical(self.root))

    def _canonical(self, i):
        node = self.nodes[i]
        if isinstance(node, Leaf):
            p = node.params
            return ("leaf", None if p is None else (p.mean, p.variance))
        return ("split", node.var, node.threshold,
                self._canonical(node.true_child), self._canonical(node.false_child))

    def __eq__(self, other):
        if not isinstance(other, RegressionTree):
            return NotImplemented
        return self._canon == other._canon

    def __hash__(self):
        return hash(self._canon)

    @classmethod
    def single_leaf(cls, params: LeafParams | None = None) -> "RegressionTree":
        return cls((Leaf(params),), 0)

    def is_leaf(self, i: int) -> bool:
        return isinstance(self.nodes[i], Leaf)

    def leaves(self) -> list[int]:
        """Leaf indices in depth-first order, true branch first."""
        out = []
        stack = [self.root]
        while stack:
            i = stack.pop()
            node = self.nodes[i]
            if isinstance(node, Leaf):
                out.append(i)
            else:
                stack.append(node.false_child)
                stack.append(node.true_child)
        return out

    def depths(self) -> dict[int, int]:
        out = {self.root: 0}
        stack = [self.root]
        while stack:
            i = stack.pop()
            node = self.nodes[i]
            if isinstance(node, Split):
                for c in (node.true_child, node.false_child):
                    out[c] = out[i] + 1
                    stack.append(c)
        return out

    def depth(self) -> int:
        return max(self.depths().values())

    @property
    def tested_vars(self) -> frozenset:
        return frozenset(n.var for n in self.nodes if isinstance(n, Split))

    def complexity(self) -> TreeComplexity:
        interior = sum(isinstance(n, Split) for n in self.nodes)
        return TreeComplexity(len(self.nodes) - interior, interior, self.tested_vars)

    def leaf_for(self, values: Mapping[int, float] | Sequence[float]) -> int:
        """Descend from the root for one instance and return the leaf index.

        ``values`` maps variable index to value (a mapping, or any sequence
        indexed by variable).  Ties ``value == threshold`` take the false arc.
        """
        i = self.root
        while True:
            node = self.nodes[i]
            if isinstance(node, Leaf):
                return i
            try:
                x = values[node.var]
            except (KeyError, IndexError):
                raise MissingValueError(f"no value for tested variable {node.var}") from None
            i = node.true_child if x < node.threshold else node.false_child

    def route(self, values: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`leaf_for` over the rows of an ``M x n`` matrix."""
        values = np.asarray(values)
        out = np.empty(values.shape[0], dtype=np.intp)
        stack = [(self.root, np.arange(values.shape[0]))]
        while stack:
            i, rows = stack.pop()
            node = self.nodes[i]
            if isinstance(node, Leaf):
                out[rows] = i
                continue
            go = values[rows, node.var] < node.threshold
            stack.append((node.true_child, rows[go]))
            stack.append((node.false_child, rows[~go]))
        return out

    def apply_split(self, leaf: int, var: int, threshold: float) -> "RegressionTree":
        """Replace ``leaf`` with a test ``var < threshold`` over two fresh leaves.

        The fresh leaves get indices ``len(nodes)`` (true) and
        ``len(nodes) + 1`` (false); every other index is preserved.
        """
        if not 0 <= leaf < len(self.nodes):
            raise TreeError(f"node {leaf} out of range")
        if not self.is_leaf(leaf):
            raise TreeError(f"node {leaf} is an interior node; only leaves can be split")
        t = len(self.nodes)
        nodes = list(self.nodes)
        nodes[leaf] = Split(int(var), float(threshold), t, t + 1)
        nodes.extend((Leaf(), Leaf()))
        return RegressionTree(tuple(nodes), self.root)

    def with_leaf_params(self, params: Mapping[int, LeafParams]) -> "RegressionTree":
        nodes = list(self.nodes)
        for i, p in params.items():
            if not self.is_leaf(i):
                raise TreeError(f"node {i} is not a leaf")
            nodes[i] = Leaf(p)
        return RegressionTree(tuple(nodes), self.root)

    def has_params(self) -> bool:
        return all(self.nodes[i].params is not None for i in self.leaves())


def leaf_log_density(params: LeafParams, x: float) -> float:
    """log N(x | mean, variance)."""
    if not math.isfinite(x):
        raise ValueError(f"density evaluated at non-finite x={x!r}")
    d = x - params.mean
    return -0.5 * (_LOG_2PI + math.log(params.variance)) - d * d / (2.0 * params.variance)


def split_candidates(data, candidate_var: int, rows) -> np.ndarray:
    """Observed thresholds for ``candidate_var`` that split ``rows`` in two.

    Sorted distinct values over ``rows`` minus the minimum, so both sides of
    ``value < u`` are non-empty.
    """
    values = getattr(data, "values", data)
    rows = np.fromiter(rows, dtype=np.intp) if not isinstance(rows, np.ndarray) else rows
    if rows.size == 0:
        raise ValueError("split_candidates needs at least one row")
    return np.unique(values[rows, candidate_var])[1:]
