"""Greedy model-merging initialisation of the module assignment.

Every block of variables is scored as a module whose tree has one leaf per
training instance, so a block's score only depends on how well its members
agree instance by instance.  Starting from singletons, the pair of blocks
whose union gains the most score is merged until ``K`` blocks remain.
"""

from __future__ import annotations

import numpy as np

from .model import ModuleAssignment
from .scoring import PriorSpec, log_marginal


class ConfigError(ValueError):
    """A requested configuration cannot be satisfied."""


def _values(data) -> np.ndarray:
    return getattr(data, "values", data)


def merge_score(data, block, prior: PriorSpec) -> float:
    """Score of ``block`` with a separate leaf for every instance."""
    block = sorted(set(int(i) for i in block))
    if not block:
        raise ValueError("block must be non-empty")
    x = _values(data)[:, block]
    return float(np.sum(log_marginal(len(block), x.sum(axis=1), (x * x).sum(axis=1), prior)))


class MergeState:
    """Partition of the variables with per-instance pooled sums and pair deltas.

    Block ``a`` is identified by its smallest variable; merging keeps the
    lower identifier.  ``delta[a, b]`` is the score change of merging ``a``
    and ``b`` and is kept only for pairs of live blocks.
    """

    def __init__(self, data, prior: PriorSpec, *, pair_deltas: bool = True):
        x = _values(data)
        self.prior = prior
        self.n = x.shape[1]
        self.row_sum = np.ascontiguousarray(x.T, dtype=float)
        self.row_sumsq = self.row_sum * self.row_sum
        self.size = np.ones(self.n, dtype=np.int64)
        self.members = {i: [i] for i in range(self.n)}
        self.live = np.ones(self.n, dtype=bool)
        self.score = self._block_scores(np.arange(self.n))
        self.delta = None
        if pair_deltas:
            self.delta = np.full((self.n, self.n), -np.inf)
            for a in range(self.n):
                self._refresh_row(a)

    def _block_scores(self, idx: np.ndarray) -> np.ndarray:
        return log_marginal(self.size[idx, None], self.row_sum[idx], self.row_sumsq[idx],
                            self.prior).sum(axis=1)

    def pair_delta(self, a: int, others: np.ndarray) -> np.ndarray:
        """Merge deltas of block ``a`` with each block in ``others``."""
        s = self.size[a] + self.size[others]
        joined = log_marginal(s[:, None], self.row_sum[a] + self.row_sum[others],
                              self.row_sumsq[a] + self.row_sumsq[others], self.prior).sum(axis=1)
        return joined - self.score[a] - self.score[others]

    def _refresh_row(self, a: int) -> None:
        others = np.flatnonzero(self.live)
        others = others[others != a]
        self.delta[a, :] = -np.inf
        self.delta[:, a] = -np.inf
        if others.size:
            d = self.pair_delta(a, others)
            self.delta[a, others] = d
            self.delta[others, a] = d

    @property
    def blocks(self) -> list[list[int]]:
        return [sorted(self.members[a]) for a in np.flatnonzero(self.live)]

    def best_pair(self) -> tuple[int, int]:
        """Live pair with the largest delta; lowest ``(a, b)`` on ties.

        The matrix is symmetric, so the first row-major maximum already has
        ``a < b``.
        """
        return divmod(int(np.argmax(self.delta)), self.n)

    def merge(self, a: int, b: int) -> None:
        a, b = min(a, b), max(a, b)
        if a == b or not (self.live[a] and self.live[b]):
            raise ValueError(f"cannot merge blocks {a} and {b}")
        self.row_sum[a] += self.row_sum[b]
        self.row_sumsq[a] += self.row_sumsq[b]
        self.size[a] += self.size[b]
        self.members[a].extend(self.members.pop(b))
        self.live[b] = False
        self.score[a] = self._block_scores(np.array([a]))[0]
        if self.delta is not None:
            self.delta[b, :] = -np.inf
            self.delta[:, b] = -np.inf
            self._refresh_row(a)


def initialize(data, prior: PriorSpec, K: int, seed: int | None = None, *,
               subsample_pairs: int | None = None) -> ModuleAssignment:
    """Merge singleton blocks greedily down to ``K`` blocks.

    Merges happen even when every delta is negative.  Labels follow the
    blocks' smallest variable index.  With ``subsample_pairs`` set, each
    round scores only that many random live pairs (drawn with ``seed``)
    instead of maintaining all pair deltas.
    """
    n = _values(data).shape[1]
    if not 1 <= K <= n:
        raise ConfigError(f"K must lie in 1..{n}, got {K}")
    state = MergeState(data, prior, pair_deltas=subsample_pairs is None)
    rng = np.random.default_rng(seed) if subsample_pairs is not None else None
    for _ in range(n - K):
        if subsample_pairs is None:
            a, b = state.best_pair()
        else:
            a, b = _sampled_best_pair(state, rng, subsample_pairs)
        state.merge(a, b)
    labels = np.empty(n, dtype=np.int64)
    for label, block in enumerate(state.blocks):
        labels[block] = label
    return ModuleAssignment(tuple(labels.tolist()), K)


def _sampled_best_pair(state: MergeState, rng: np.random.Generator, count: int):
    live = np.flatnonzero(state.live)
    a = rng.choice(live, size=count)
    b = rng.choice(live, size=count)
    keep = a != b
    if not keep.any():
        return int(live[0]), int(live[1])
    pairs = np.unique(np.sort(np.stack([a[keep], b[keep]], axis=1), axis=1), axis=0)
    best, best_pair = -np.inf, None
    for lo, hi in pairs:
        d = float(state.pair_delta(int(lo), np.array([hi]))[0])
        if best_pair is None or d > best:
            best, best_pair = d, (int(lo), int(hi))
    return best_pair
