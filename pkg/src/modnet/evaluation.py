"""Held-out likelihood, structure recovery, cross-validation and enrichment."""

from __future__ import annotations

import dataclasses
import math
import statistics
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import hypergeom

from .initialization import ConfigError, initialize
from .model import ModuleAssignment, ModuleNetwork, ground_network
from .scoring import PriorSpec, ScoreError, log_likelihood
from .search import SearchConfig, TraceRecord, learn


def _values(data) -> np.ndarray:
    return getattr(data, "values", data)


def heldout_ll(net: ModuleNetwork, test) -> float:
    """Log-likelihood of ``test`` per instance."""
    values = np.asarray(_values(test), dtype=float)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("held-out set has no instances")
    return log_likelihood(values, net) / values.shape[0]


def recovered_edge_fraction(learned: ModuleNetwork, truth: ModuleNetwork) -> float:
    """Share of the truth's ground (parent, child) edges present in ``learned``."""
    if learned.n != truth.n:
        raise ValueError(f"networks cover {learned.n} and {truth.n} variables")
    true_edges = ground_network(truth).edges()
    if not true_edges:
        raise ValueError("truth has no parent-child edges; recovery fraction is undefined")
    found = ground_network(learned).edges()
    return len(found & true_edges) / len(true_edges)


def top_module_mass(net: ModuleNetwork, top: int = 10) -> float:
    """Fraction of variables in the ``top`` largest modules."""
    if top < 1:
        raise ValueError("top must be >= 1")
    sizes = sorted(net.assignment.sizes(), reverse=True)
    return sum(sizes[:top]) / net.n


def train(data, prior: PriorSpec, cfg: SearchConfig, seed: int | None = None
          ) -> tuple[ModuleNetwork, list[TraceRecord]]:
    """Initialise by model merging (identity when the assignment is fixed) and learn."""
    n = _values(data).shape[1]
    if cfg.fixed_assignment:
        if cfg.K != n:
            raise ConfigError("a fixed assignment requires K equal to the variable count")
        assignment = ModuleAssignment.identity(n)
    else:
        assignment = initialize(data, prior, cfg.K, seed)
    names = getattr(data, "var_names", None)
    init = ModuleNetwork.from_assignment(assignment, var_names=names,
                                         standardization=getattr(data, "standardization", None))
    return learn(data, prior, cfg, init)


def baseline_config(cfg: SearchConfig, n: int) -> SearchConfig:
    """Per-variable Bayesian network: every variable its own, fixed module."""
    return dataclasses.replace(cfg, K=n, fixed_assignment=True)


def fold_indices(M: int, folds: int, seed: int = 0) -> np.ndarray:
    """Fold label of every instance: position in a seeded shuffle, modulo ``folds``."""
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    if M < folds:
        raise ConfigError(f"{folds} folds need at least {folds} instances, got {M}")
    perm = np.random.default_rng(seed).permutation(M)
    out = np.empty(M, dtype=np.int64)
    out[perm] = np.arange(M) % folds
    return out


@dataclass(frozen=True)
class FoldResult:
    fold: int
    train_size: int
    test_size: int
    heldout_ll: float
    baseline_ll: float | None

    @property
    def diff(self) -> float | None:
        return None if self.baseline_ll is None else self.heldout_ll - self.baseline_ll


@dataclass(frozen=True)
class EvalReport:
    heldout_ll_per_instance: float
    heldout_ll_std: float
    baseline_ll_per_instance: float | None = None
    baseline_diff_std: float | None = None
    recovered_edge_fraction: float | None = None
    top_module_mass: float | None = None
    folds: tuple = ()
    failures: int = 0


def _mean_std(xs):
    if not xs:
        return math.nan, math.nan
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def cross_validate(data, prior: PriorSpec, cfg: SearchConfig, folds: int = 10, *,
                   seed: int = 0, baseline: bool = True) -> EvalReport:
    """K-fold held-out likelihood of the learner, optionally against the per-variable baseline.

    Folds whose learning hits a non-finite score are counted in
    ``failures`` and left out of the mean and standard deviation.
    """
    values = _values(data)
    M, n = values.shape
    labels = fold_indices(M, folds, seed)
    rows = getattr(data, "rows", None)
    results = []
    failures = 0
    for f in range(folds):
        test_idx = np.flatnonzero(labels == f)
        train_idx = np.flatnonzero(labels != f)
        if test_idx.size == 0:
            raise ConfigError(f"fold {f} has no test instances")
        train_data = rows(train_idx) if rows else values[train_idx]
        test_values = values[test_idx]
        try:
            net, _ = train(train_data, prior, cfg, seed)
            ll = heldout_ll(net, test_values)
            base = None
            if baseline:
                bn, _ = train(train_data, prior, baseline_config(cfg, n), seed)
                base = heldout_ll(bn, test_values)
        except ScoreError:
            failures += 1
            continue
        results.append(FoldResult(f, int(train_idx.size), int(test_idx.size), ll, base))
    mean, std = _mean_std([r.heldout_ll for r in results])
    base_mean = diff_std = None
    if baseline and results:
        base_mean = statistics.fmean(r.baseline_ll for r in results)
        diff_std = _mean_std([r.diff for r in results])[1]
    return EvalReport(mean, std, base_mean, diff_std, folds=tuple(results), failures=failures)


def log_enrichment_pvalue(population: int, annotated: int, module_size: int, hits: int) -> float:
    """Natural log of the hypergeometric upper tail ``P[X >= hits]``."""
    for name, v in (("population", population), ("annotated", annotated),
                    ("module_size", module_size), ("hits", hits)):
        if int(v) != v or v < 0:
            raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
    if not (hits <= module_size <= population and hits <= annotated <= population):
        raise ValueError(f"inconsistent counts: population={population}, annotated={annotated}, "
                         f"module_size={module_size}, hits={hits}")
    if hits == 0:
        return 0.0
    k = np.arange(hits, min(annotated, module_size) + 1)
    terms = hypergeom.logpmf(k, population, annotated, module_size)
    return min(0.0, float(logsumexp(terms)))


def enrichment_pvalue(population: int, annotated: int, module_size: int, hits: int) -> float:
    """Probability that a random ``module_size`` subset holds at least ``hits`` annotated items."""
    return math.exp(log_enrichment_pvalue(population, annotated, module_size, hits))
