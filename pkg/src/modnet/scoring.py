"""Pooled Gaussian statistics, Normal-Gamma marginal likelihoods and the
decomposed Bayesian score of a module network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import gammaln

from .model import CycleError, ModuleNetwork, build_module_graph, find_cycle
from .tree import LeafParams, RegressionTree

_LOG_2PI = math.log(2.0 * math.pi)
# above this many pooled cells the per-leaf sums use math.fsum
_COMPENSATED_CELLS = 1_000_000


class ScoreError(ArithmeticError):
    """A score or likelihood evaluated to a non-finite value."""


class StateError(RuntimeError):
    """Leaf parameters were needed but have not been materialised."""


@dataclass(frozen=True)
class GaussianStats:
    """Additive sufficient statistics ``(count, sum, sum of squares)``."""

    count: int = 0
    sum: float = 0.0
    sumsq: float = 0.0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if self.count == 0 and (self.sum != 0.0 or self.sumsq != 0.0):
            raise ValueError("empty statistics must have zero sum and sumsq")

    @classmethod
    def of(cls, values) -> "GaussianStats":
        x = np.asarray(values, dtype=float).ravel()
        if x.size == 0:
            return cls()
        return cls(int(x.size), float(x.sum()), float(np.dot(x, x)))

    def __add__(self, other: "GaussianStats") -> "GaussianStats":
        return GaussianStats(self.count + other.count, self.sum + other.sum,
                             self.sumsq + other.sumsq)

    @property
    def mean(self) -> float:
        return self.sum / self.count if self.count else 0.0


@dataclass(frozen=True)
class PriorSpec:
    """Normal-Gamma leaf prior plus structure and assignment prior weights.

    Each leaf has precision ``tau ~ Gamma(alpha0, rate=beta0)`` and mean
    ``mu | tau ~ N(mu0, 1 / (kappa0 * tau))``.  The structure prior charges
    ``lambda_s`` nats per interior tree node.  ``size_log_weight``, when
    given, maps a module's size to its log assignment weight; the default
    is the uniform assignment prior.
    """

    mu0: float = 0.0
    kappa0: float = 0.1
    alpha0: float = 1.0
    beta0: float = 1.0
    lambda_s: float = 0.0
    size_log_weight: Callable[[int], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("kappa0", "alpha0", "beta0"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        if not math.isfinite(self.mu0):
            raise ValueError(f"mu0 must be finite, got {self.mu0!r}")
        if not (math.isfinite(self.lambda_s) and self.lambda_s >= 0):
            raise ValueError(f"lambda_s must be finite and >= 0, got {self.lambda_s!r}")

    def log_assignment_prior(self, size: int) -> float:
        return 0.0 if self.size_log_weight is None else float(self.size_log_weight(size))

    def log_structure_prior(self, tree: RegressionTree) -> float:
        return -self.lambda_s * tree.complexity().interior


class ModuleScore(NamedTuple):
    log_marginal: float
    log_structure_prior: float
    log_assignment_prior: float

    @property
    def total(self) -> float:
        return self.log_marginal + self.log_structure_prior + self.log_assignment_prior


@dataclass(frozen=True)
class ScoreReport:
    total: float
    per_module: tuple
    breakdown: tuple


def log_marginal(count, total, sumsq, prior: PriorSpec):
    """Vectorised Normal-Gamma log marginal likelihood of Gaussian data.

    Arguments are broadcastable arrays of pooled statistics.  Entries with
    ``count == 0`` score exactly 0.
    """
    count = np.asarray(count, dtype=float)
    total = np.asarray(total, dtype=float)
    sumsq = np.asarray(sumsq, dtype=float)
    nz = count > 0
    safe_n = np.where(nz, count, 1.0)
    kappa_n = prior.kappa0 + count
    alpha_n = prior.alpha0 + 0.5 * count
    scatter = np.maximum(sumsq - total * total / safe_n, 0.0)
    shift = total - count * prior.mu0
    beta_n = prior.beta0 + 0.5 * scatter + prior.kappa0 * shift * shift / (2.0 * safe_n * kappa_n)
    out = (gammaln(alpha_n) - math.lgamma(prior.alpha0)
           + prior.alpha0 * math.log(prior.beta0) - alpha_n * np.log(beta_n)
           + 0.5 * (math.log(prior.kappa0) - np.log(kappa_n))
           - 0.5 * count * _LOG_2PI)
    return np.where(nz, out, 0.0)


def leaf_log_marginal(stats: GaussianStats, prior: PriorSpec) -> float:
    if stats.count == 0:
        return 0.0
    return float(log_marginal(stats.count, stats.sum, stats.sumsq, prior))


def posterior_leaf_params(stats: GaussianStats, prior: PriorSpec) -> LeafParams:
    """Posterior mean of the leaf mean and posterior expectation of its variance.

    When the posterior shape is at most 1 the expected variance is
    undefined; ``beta_n / alpha_n`` (the inverse expected precision) is used.
    """
    n = stats.count
    kappa_n = prior.kappa0 + n
    mean = (prior.kappa0 * prior.mu0 + stats.sum) / kappa_n
    alpha_n = prior.alpha0 + 0.5 * n
    if n > 0:
        scatter = max(stats.sumsq - stats.sum * stats.sum / n, 0.0)
        shift = stats.sum - n * prior.mu0
        beta_n = prior.beta0 + 0.5 * scatter + prior.kappa0 * shift * shift / (2.0 * n * kappa_n)
    else:
        beta_n = prior.beta0
    variance = beta_n / (alpha_n - 1.0) if alpha_n > 1.0 else beta_n / alpha_n
    return LeafParams(mean, variance)


class ModuleState(NamedTuple):
    """Pooled statistics of one module under its tree.

    ``leaves`` are node indices; ``counts``/``sums``/``sumsqs`` are aligned
    with them.  ``leaf_of_row`` routes every instance; ``row_sum`` and
    ``row_sumsq`` are the per-instance sums over member variables.
    """

    members: tuple
    leaves: np.ndarray
    leaf_of_row: np.ndarray
    rows_per_leaf: np.ndarray
    row_sum: np.ndarray
    row_sumsq: np.ndarray
    counts: np.ndarray
    sums: np.ndarray
    sumsqs: np.ndarray
    score: ModuleScore


def module_state(values: np.ndarray, tree: RegressionTree, members: tuple,
                 prior: PriorSpec) -> ModuleState:
    """From-scratch pooled statistics and score of one module.

    Every score in the package, cached or not, goes through this function so
    that cached and recomputed values agree bit for bit.
    """
    M = values.shape[0]
    leaves = np.asarray(tree.leaves(), dtype=np.intp)
    leaf_of_row = tree.route(values)
    size = len(tree.nodes)
    rows_per_leaf = np.bincount(leaf_of_row, minlength=size)[leaves]
    if members:
        block = values[:, list(members)]
        row_sum = block.sum(axis=1)
        row_sumsq = (block * block).sum(axis=1)
    else:
        row_sum = np.zeros(M)
        row_sumsq = np.zeros(M)
    if M * len(members) > _COMPENSATED_CELLS:
        sums = np.array([math.fsum(row_sum[leaf_of_row == l]) for l in leaves])
        sumsqs = np.array([math.fsum(row_sumsq[leaf_of_row == l]) for l in leaves])
    else:
        sums = np.bincount(leaf_of_row, weights=row_sum, minlength=size)[leaves]
        sumsqs = np.bincount(leaf_of_row, weights=row_sumsq, minlength=size)[leaves]
    counts = rows_per_leaf * len(members)
    if members:
        lm = float(np.sum(log_marginal(counts, sums, sumsqs, prior)))
    else:
        sums = np.zeros(len(leaves))
        sumsqs = np.zeros(len(leaves))
        lm = 0.0
    score = ModuleScore(lm, prior.log_structure_prior(tree),
                        prior.log_assignment_prior(len(members)))
    return ModuleState(tuple(members), leaves, leaf_of_row, rows_per_leaf, row_sum,
                       row_sumsq, counts, sums, sumsqs, score)


def _values(data) -> np.ndarray:
    return getattr(data, "values", data)


def pooled_leaf_stats(data, net: ModuleNetwork, j: int) -> dict[int, GaussianStats]:
    """Leaf node index -> statistics pooled over instances and module members."""
    if not 0 <= j < net.K:
        raise IndexError(f"module {j} out of range 0..{net.K - 1}")
    st = module_state(_values(data), net.trees[j], net.members(j), PriorSpec())
    return {int(l): (GaussianStats(int(c), float(s), float(q)) if c else GaussianStats())
            for l, c, s, q in zip(st.leaves, st.counts, st.sums, st.sumsqs)}


def module_log_marginal(data, net: ModuleNetwork, j: int, prior: PriorSpec) -> float:
    return module_state(_values(data), net.trees[j], net.members(j), prior).score.log_marginal


def module_score(data, net: ModuleNetwork, j: int, prior: PriorSpec) -> float:
    return module_state(_values(data), net.trees[j], net.members(j), prior).score.total


def total_score(data, net: ModuleNetwork, prior: PriorSpec) -> ScoreReport:
    cycle = find_cycle(build_module_graph(net))
    if cycle is not None:
        raise CycleError(cycle)
    values = _values(data)
    breakdown = tuple(module_state(values, net.trees[j], net.members(j), prior).score
                      for j in range(net.K))
    per_module = tuple(s.total for s in breakdown)
    return ScoreReport(float(sum(per_module)), per_module, breakdown)


def fit_parameters(data, net: ModuleNetwork, prior: PriorSpec) -> ModuleNetwork:
    """Materialise posterior leaf parameters for every module."""
    values = _values(data)
    trees = []
    for j, tree in enumerate(net.trees):
        st = module_state(values, tree, net.members(j), prior)
        params = {}
        for l, c, s, q in zip(st.leaves, st.counts, st.sums, st.sumsqs):
            stats = GaussianStats(int(c), float(s), float(q)) if c else GaussianStats()
            params[int(l)] = posterior_leaf_params(stats, prior)
        trees.append(tree.with_leaf_params(params))
    return net.with_trees(trees)


def log_likelihood(data, net: ModuleNetwork) -> float:
    """Log density of every instance under the network's leaf parameters."""
    values = _values(data)
    total = 0.0
    for j, tree in enumerate(net.trees):
        members = net.members(j)
        if not members:
            continue
        if not tree.has_params():
            raise StateError(f"module {j} has leaves without parameters; call fit_parameters")
        size = len(tree.nodes)
        means = np.zeros(size)
        variances = np.ones(size)
        for l in tree.leaves():
            p = tree.nodes[l].params
            means[l], variances[l] = p.mean, p.variance
        leaf = tree.route(values)
        mu = means[leaf][:, None]
        var = variances[leaf][:, None]
        d = values[:, list(members)] - mu
        total += float(np.sum(-0.5 * (_LOG_2PI + np.log(var)) - d * d / (2.0 * var)))
    if not math.isfinite(total):
        raise ScoreError("log-likelihood is not finite")
    return total
