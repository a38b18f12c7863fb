"""Iterative structure / assignment search for module networks.

The learner alternates two hill-climbing steps, each of which only ever
commits operators that raise the total score by more than ``epsilon``:

* :func:`structure_step` grows regression trees by leaf splits, scoring
  every candidate with a short beam lookahead beneath it;
* :func:`assignment_step` moves variables one at a time to their best legal
  module, refreshing pooled statistics after every move.

Module scores live in a :class:`ScoreCache`; a committed operator marks
only the modules it touches as stale.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._kernels import best_split_per_var, count_tables, greedy_lookahead
from .model import (CycleError, ModuleGraph, ModuleNetwork, build_module_graph, find_cycle,
                    module_edges)
from .scoring import (ModuleState, PriorSpec, ScoreError, fit_parameters, log_marginal,
                      module_state)
from .tree import RegressionTree


@dataclass(frozen=True)
class SearchConfig:
    K: int
    max_outer_iters: int = 50
    epsilon: float = 1e-6
    lookahead: int = 3
    beam_width: int = 1
    min_leaf: int = 5
    rng_seed: int = 0
    max_depth: int | None = None
    fixed_assignment: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.lookahead < 1:
            raise ValueError(f"lookahead must be >= 1, got {self.lookahead}")
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.min_leaf < 1:
            raise ValueError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")


class TraceRecord(NamedTuple):
    iteration: int
    kind: str
    module: int | None
    score: float
    elapsed: float


def _values(data) -> np.ndarray:
    return getattr(data, "values", data)


class ScoreCache:
    """Per-module scores and pooled statistics with staleness tracking.

    The cache is an optimisation only: every entry is produced by
    :func:`modnet.scoring.module_state`, the same routine used for
    from-scratch scoring, so cached and recomputed values are identical.
    """

    def __init__(self, data, net: ModuleNetwork, prior: PriorSpec):
        self.values = _values(data)
        self.prior = prior
        self.net = net
        self.states: list[ModuleState] = [self._compute(j) for j in range(net.K)]
        self.stale: set[int] = set()

    def _compute(self, j: int) -> ModuleState:
        st = module_state(self.values, self.net.trees[j], self.net.members(j), self.prior)
        if not math.isfinite(st.score.total):
            bad = [int(l) for l, c, s, q in zip(st.leaves, st.counts, st.sums, st.sumsqs)
                   if not np.isfinite(log_marginal(c, s, q, self.prior))]
            raise ScoreError(f"non-finite score in module {j}, leaf {bad[0] if bad else '?'}")
        return st

    def mark_stale(self, modules) -> None:
        self.stale.update(int(j) for j in modules)

    def refresh(self, net: ModuleNetwork) -> None:
        self.net = net
        for j in sorted(self.stale):
            self.states[j] = self._compute(j)
        self.stale.clear()

    def state(self, j: int) -> ModuleState:
        if j in self.stale:
            self.states[j] = self._compute(j)
            self.stale.discard(j)
        return self.states[j]

    def put(self, net: ModuleNetwork, j: int, state: ModuleState) -> None:
        self.net = net
        self.states[j] = state
        self.stale.discard(j)

    def scores(self) -> list[float]:
        return [self.state(j).score.total for j in range(len(self.states))]

    def total(self) -> float:
        return float(sum(self.scores()))


def delta_rescore(cache: ScoreCache, data, net: ModuleNetwork, touched) -> ScoreCache:
    """Recompute the modules in ``touched`` after an edit that produced ``net``."""
    cache.values = _values(data)
    cache.mark_stale(touched)
    cache.refresh(net)
    return cache


class _Candidate(NamedTuple):
    value: float
    leaf: int
    var: int
    threshold: float
    path: tuple  # ((branch, var, threshold), ...) relative to ``leaf``


class _LeafEval:
    """Lookahead results for one leaf, one row per first-split variable.

    ``steps`` counts every greedy step taken, including those past the
    committed prefix of ``length`` steps; a row stays valid while all the
    variables it used remain allowed.
    """

    __slots__ = ("allowed", "vars", "value", "thr", "length", "steps", "p_leaf", "p_var",
                 "p_thr", "candidate", "rejected")

    def __init__(self, allowed, vars_, value, thr, length, steps, p_leaf, p_var, p_thr):
        self.allowed = allowed
        self.vars = vars_
        self.value = value
        self.thr = thr
        self.length = length
        self.steps = steps
        self.p_leaf = p_leaf
        self.p_var = p_var
        self.p_thr = p_thr
        self.candidate = None
        self.rejected = False

    def select(self, leaf: int) -> _Candidate | None:
        if self.rejected or self.vars.size == 0:
            return None
        if self.candidate is None:
            a = np.lexsort((self.thr, self.vars, -self.value))[0]
            branch_of = {0: ()}
            path = []
            for s in range(self.length[a]):
                b = branch_of[int(self.p_leaf[a, s])]
                branch_of[2 * s + 1], branch_of[2 * s + 2] = b + (True,), b + (False,)
                path.append((b, int(self.p_var[a, s]), float(self.p_thr[a, s])))
            self.candidate = _Candidate(float(self.value[a]), leaf, int(self.vars[a]),
                                        float(self.thr[a]), tuple(path))
        return self.candidate


class _ModuleEntry:
    def __init__(self, members: tuple, tree: RegressionTree):
        self.members = members
        self.tree = tree
        self.leaves: dict[int, _LeafEval] = {}


class _Workspace:
    """Data-dependent precomputation shared by all steps of one learn run."""

    def __init__(self, values: np.ndarray, prior: PriorSpec, cfg: SearchConfig):
        self.values = values
        self.prior = prior
        self.cfg = cfg
        order = np.argsort(values, axis=0, kind="stable")
        self.order = np.ascontiguousarray(order.T, dtype=np.int64)
        self.sorted_vals = np.ascontiguousarray(np.take_along_axis(values, order, axis=0).T)
        self.vals_t = np.ascontiguousarray(values.T)
        self._tables: dict[int, np.ndarray] = {}
        self.modules: dict[int, _ModuleEntry] = {}

    def tables(self, size: int) -> np.ndarray:
        if size not in self._tables:
            self._tables[size] = count_tables(self.values.shape[0], size, self.prior)
        return self._tables[size]

    def min_rows(self, size: int) -> int:
        return max(1, math.ceil(self.cfg.min_leaf / size))

    def sweep(self, st: ModuleState, mask: np.ndarray, var_ids: np.ndarray, min_rows: int):
        """Best split per variable; returns ``[(gain, var, threshold), ...]`` best first."""
        n_rows = int(mask.sum())
        if n_rows < 2 * min_rows or var_ids.size == 0:
            return []
        gain = np.empty(var_ids.size)
        thr = np.empty(var_ids.size)
        rows = np.empty(var_ids.size, dtype=np.int64)
        best_split_per_var(self.order, self.sorted_vals, mask, n_rows, st.row_sum, st.row_sumsq,
                           var_ids, min_rows, self.tables(len(st.members)), self.prior.beta0,
                           gain, thr, rows)
        ok = rows >= 0
        gain = gain[ok] - self.prior.lambda_s
        vs = var_ids[ok]
        thr = thr[ok]
        idx = np.lexsort((vs, -gain))
        return [(float(gain[i]), int(vs[i]), float(thr[i])) for i in idx]

    def evaluate_leaf(self, st: ModuleState, leaf: int, depth: int, var_ids: np.ndarray,
                      first: np.ndarray | None = None) -> _LeafEval:
        """Lookahead values of first splits of ``leaf`` on ``first`` (default: all allowed)."""
        if self.cfg.beam_width == 1:
            return self._evaluate_greedy(st, leaf, depth, var_ids, first)
        return self._evaluate_beam(st, leaf, depth, var_ids)

    def _evaluate_greedy(self, st, leaf, depth, var_ids, first=None):
        cfg = self.cfg
        L = cfg.lookahead
        first_pos = (np.arange(var_ids.size, dtype=np.int64) if first is None
                     else np.searchsorted(var_ids, first).astype(np.int64))
        F = first_pos.size
        gain, thr, value = np.empty(F), np.empty(F), np.empty(F)
        length = np.empty(F, dtype=np.int64)
        steps = np.empty(F, dtype=np.int64)
        p_leaf = np.zeros((F, L), dtype=np.int64)
        p_var = np.full((F, L), -1, dtype=np.int64)
        p_thr = np.zeros((F, L))
        if F:
            greedy_lookahead(self.order, self.vals_t, st.leaf_of_row == leaf, depth,
                             -1 if cfg.max_depth is None else cfg.max_depth, st.row_sum,
                             st.row_sumsq, var_ids, first_pos, self.min_rows(len(st.members)),
                             self.tables(len(st.members)), self.prior.beta0, self.prior.lambda_s,
                             L, gain, thr, value, length, steps, p_leaf, p_var, p_thr)
        ok = length > 0
        return _LeafEval(var_ids, var_ids[first_pos][ok], value[ok], thr[ok], length[ok],
                         steps[ok], p_leaf[ok], p_var[ok], p_thr[ok])

    def _evaluate_beam(self, st, leaf, depth, var_ids):
        """Reference lookahead for any beam width, in plain Python over leaf masks."""
        cfg = self.cfg
        L = cfg.lookahead
        min_rows = self.min_rows(len(st.members))
        values = self.values
        memo: dict[bytes, list] = {}

        def sweep(mask, d):
            if cfg.max_depth is not None and d >= cfg.max_depth:
                return []
            key = np.packbits(mask).tobytes()
            if key not in memo:
                memo[key] = self.sweep(st, mask, var_ids, min_rows)
            return memo[key]

        mask = st.leaf_of_row == leaf
        rows = []
        for g1, v, u in sweep(mask, depth):
            col = values[:, v] < u
            path0 = (((), v, u),)
            beam = [(g1, path0, [((True,), mask & col, depth + 1),
                                 ((False,), mask & ~col, depth + 1)])]
            value, path = g1, path0
            for _ in range(L - 1):
                expansions = []
                for b, (g, _p, leaves) in enumerate(beam):
                    for li, (_branch, m, d) in enumerate(leaves):
                        for g2, v2, u2 in sweep(m, d)[:cfg.beam_width]:
                            expansions.append((g + g2, b, li, v2, u2))
                if not expansions:
                    break
                expansions.sort(key=lambda e: (-e[0], e[1], e[2], e[3], e[4]))
                new_beam = []
                for total, b, li, v2, u2 in expansions[:cfg.beam_width]:
                    _g, p, leaves = beam[b]
                    branch, m, d = leaves[li]
                    col2 = values[:, v2] < u2
                    grown = (leaves[:li]
                             + [(branch + (True,), m & col2, d + 1),
                                (branch + (False,), m & ~col2, d + 1)]
                             + leaves[li + 1:])
                    new_beam.append((total, p + ((branch, v2, u2),), grown))
                beam = new_beam
                if beam[0][0] > value:
                    value, path = beam[0][0], beam[0][1]
            rows.append((v, value, u, path))
        return _beam_eval(var_ids, rows, L)

    def leaf_candidates(self, j: int, tree: RegressionTree, st: ModuleState,
                        allowed: np.ndarray) -> list[_Candidate]:
        entry = self.modules.get(j)
        if entry is None or entry.members != st.members or entry.tree is not tree:
            entry = self.modules[j] = _ModuleEntry(st.members, tree)
        depths = None
        out = []
        for leaf in tree.leaves():
            le = entry.leaves.get(leaf)
            if le is None or not self._still_valid(le, allowed):
                depths = depths or tree.depths()
                le = entry.leaves[leaf] = self._refresh(le, st, leaf, depths[leaf], allowed)
            cand = le.select(leaf)
            if cand is not None:
                out.append(cand)
        return out

    def _still_valid(self, le: _LeafEval, allowed: np.ndarray) -> bool:
        return le.allowed is allowed or np.array_equal(le.allowed, allowed)

    def _refresh(self, le, st, leaf, depth, allowed) -> _LeafEval:
        """Re-evaluate a leaf after its allowed variables changed.

        With a greedy lookahead and a shrunken allowed set, rows whose whole
        path avoids the newly banned variables are unchanged: each step's
        winner is still present and still wins.  Only the other rows are
        recomputed.
        """
        if le is None or self.cfg.beam_width != 1 or le.rejected:
            if le is not None and le.rejected and _subset(allowed, le.allowed):
                le.allowed = allowed
                return le
            return self.evaluate_leaf(st, leaf, depth, allowed)
        if not _subset(allowed, le.allowed):
            return self.evaluate_leaf(st, leaf, depth, allowed)
        ok = np.zeros(self.values.shape[1] + 1, dtype=bool)
        ok[allowed] = True  # index -1 (unused path slot) maps to the trailing True
        ok[-1] = True
        keep = ok[le.vars] & ok[le.p_var].all(axis=1)
        redo = le.vars[ok[le.vars] & ~keep]
        fresh = self.evaluate_leaf(st, leaf, depth, allowed, first=redo)
        return _LeafEval(allowed, *(np.concatenate([old[keep], new]) for old, new in (
            (le.vars, fresh.vars), (le.value, fresh.value), (le.thr, fresh.thr),
            (le.length, fresh.length), (le.steps, fresh.steps), (le.p_leaf, fresh.p_leaf),
            (le.p_var, fresh.p_var), (le.p_thr, fresh.p_thr))))

    def committed(self, j: int, leaf: int, new_tree: RegressionTree) -> None:
        entry = self.modules.get(j)
        if entry is not None:
            entry.leaves.pop(leaf, None)
            entry.tree = new_tree

    def reject(self, j: int, leaf: int) -> None:
        entry = self.modules.get(j)
        if entry is not None and leaf in entry.leaves:
            entry.leaves[leaf].rejected = True


def _subset(a: np.ndarray, b: np.ndarray) -> bool:
    return a.size <= b.size and bool(np.isin(a, b, assume_unique=True).all())


def _beam_eval(var_ids, rows, L) -> _LeafEval:
    F = len(rows)
    p_leaf = np.zeros((F, L), dtype=np.int64)
    p_var = np.full((F, L), -1, dtype=np.int64)
    p_thr = np.zeros((F, L))
    for f, (_v, _value, _u, path) in enumerate(rows):
        ids = {(): 0}
        for s, (branch, v, u) in enumerate(path):
            p_leaf[f, s] = ids[branch]
            ids[branch + (True,)], ids[branch + (False,)] = 2 * s + 1, 2 * s + 2
            p_var[f, s] = v
            p_thr[f, s] = u
    length = np.array([len(r[3]) for r in rows], dtype=np.int64)
    return _LeafEval(var_ids, np.array([r[0] for r in rows], dtype=np.int64),
                     np.array([r[1] for r in rows], dtype=float),
                     np.array([r[2] for r in rows], dtype=float), length, length.copy(),
                     p_leaf, p_var, p_thr)


def allowed_parents(net: ModuleNetwork, graph=None) -> list[np.ndarray]:
    """Variables that module ``j`` may test without creating a cycle.

    A variable is banned for ``j`` when its module is ``j`` or reachable
    from ``j``, since the new edge would close a loop.
    """
    graph = graph or build_module_graph(net)
    succ = graph.successors()
    assign = np.asarray(net.assignment.assign)
    out = []
    for j in range(net.K):
        banned = np.zeros(net.K, dtype=bool)
        banned[j] = True
        stack = list(succ[j])
        while stack:
            k = stack.pop()
            if not banned[k]:
                banned[k] = True
                stack.extend(succ[k])
        out.append(np.flatnonzero(~banned[assign]).astype(np.int64))
    return out


def apply_path(tree: RegressionTree, leaf: int, path) -> RegressionTree:
    """Apply a sequence of splits addressed by branch paths from ``leaf``."""
    index = {(): leaf}
    for branch, v, u in path:
        t = len(tree.nodes)
        tree = tree.apply_split(index[branch], v, u)
        index[branch + (True,)] = t
        index[branch + (False,)] = t + 1
    return tree


def _require_acyclic(net: ModuleNetwork) -> None:
    cycle = find_cycle(build_module_graph(net))
    if cycle is not None:
        raise CycleError(cycle)


def structure_step(data, net: ModuleNetwork, prior: PriorSpec, cfg: SearchConfig, *,
                   cache: ScoreCache | None = None, workspace: _Workspace | None = None,
                   trace: list | None = None, iteration: int = 0,
                   clock: float | None = None) -> tuple[ModuleNetwork, bool]:
    """Commit improving leaf splits until none improves the score by > epsilon.

    Each candidate first split is valued by the best score reachable with
    up to ``cfg.lookahead`` splits beneath it (beam width
    ``cfg.beam_width``).  The winning candidate is committed together with
    the lookahead splits that reach that best value, so every commit raises
    the total score.
    """
    values = _values(data)
    _require_acyclic(net)
    ws = workspace or _Workspace(values, prior, cfg)
    cache = cache or ScoreCache(values, net, prior)
    clock = time.perf_counter() if clock is None else clock
    improved = False
    while True:
        allowed = allowed_parents(net)
        best = best_key = None
        for j in range(net.K):
            st = cache.state(j)
            if not st.members:
                continue
            for c in ws.leaf_candidates(j, net.trees[j], st, allowed[j]):
                key = (-c.value, j, c.leaf, c.var, c.threshold)
                if best_key is None or key < best_key:
                    best, best_key = (j, c), key
        if best is None or not best[1].value > cfg.epsilon:
            break
        j, cand = best
        old = cache.state(j)
        new_tree = apply_path(net.trees[j], cand.leaf, cand.path)
        new_state = module_state(values, new_tree, old.members, prior)
        if not new_state.score.total - old.score.total > cfg.epsilon:
            ws.reject(j, cand.leaf)
            continue
        net = net.with_tree(j, new_tree)
        cache.put(net, j, new_state)
        ws.committed(j, cand.leaf, new_tree)
        improved = True
        if trace is not None:
            trace.append(TraceRecord(iteration, "split", j, cache.total(),
                                     time.perf_counter() - clock))
    return net, improved


def assignment_step(data, net: ModuleNetwork, prior: PriorSpec, cfg: SearchConfig, *,
                    cache: ScoreCache | None = None, trace: list | None = None,
                    iteration: int = 0, clock: float | None = None
                    ) -> tuple[ModuleNetwork, bool]:
    """Sequential round-robin reassignment of variables under fixed trees.

    Variables are visited in index order; each moves to the legal module
    with the largest score gain if that gain exceeds ``epsilon`` (staying
    wins ties).  Pooled statistics are refreshed before the next variable
    is considered.  Sweeps repeat until a full pass moves nothing.
    """
    values = _values(data)
    _require_acyclic(net)
    K = net.K
    if K == 1:
        return net, False
    cache = cache or ScoreCache(values, net, prior)
    clock = time.perf_counter() if clock is None else clock
    n = net.n
    sq = values * values

    # per-leaf statistics of every single variable; trees are fixed here
    states = [cache.state(j) for j in range(K)]
    offsets = np.zeros(K + 1, dtype=np.intp)
    for j, st in enumerate(states):
        offsets[j + 1] = offsets[j] + len(st.leaves)
    rows = np.concatenate([st.rows_per_leaf for st in states]).astype(float)
    var_sum = np.empty((offsets[-1], n))
    var_sq = np.empty((offsets[-1], n))
    M = values.shape[0]
    for j, st in enumerate(states):
        slot_of_node = np.full(len(net.trees[j].nodes), -1, dtype=np.intp)
        slot_of_node[st.leaves] = np.arange(len(st.leaves))
        onehot = np.zeros((len(st.leaves), M))
        onehot[slot_of_node[st.leaf_of_row], np.arange(M)] = 1.0
        var_sum[offsets[j]:offsets[j + 1]] = onehot @ values
        var_sq[offsets[j]:offsets[j + 1]] = onehot @ sq

    N = np.concatenate([st.counts for st in states]).astype(float)
    S = np.concatenate([st.sums for st in states])
    Q = np.concatenate([st.sumsqs for st in states])
    base = log_marginal(N, S, Q, prior)
    ml = np.array([st.score.log_marginal for st in states])

    parent_sets = [net.parents(j) for j in range(K)]
    parent_of = [[k for k in range(K) if i in parent_sets[k]] for i in range(n)]
    assign = list(net.assignment.assign)
    sizes = net.assignment.sizes()

    def legal(i, k):
        if not parent_of[i]:
            return True
        trial = list(assign)
        trial[i] = k
        return find_cycle(ModuleGraph(K, module_edges(trial, parent_sets))) is None

    def refresh_flat(j):
        st = cache.state(j)
        sl = slice(offsets[j], offsets[j + 1])
        N[sl] = st.counts
        S[sl] = st.sums
        Q[sl] = st.sumsqs
        base[sl] = log_marginal(N[sl], S[sl], Q[sl], prior)
        ml[j] = st.score.log_marginal

    improved = False
    while True:
        changed = False
        for i in range(n):
            j = assign[i]
            sl = slice(offsets[j], offsets[j + 1])
            removed = float(np.sum(log_marginal(N[sl] - rows[sl], S[sl] - var_sum[sl, i],
                                                 Q[sl] - var_sq[sl, i], prior)))
            if sizes[j] == 1:
                removed = 0.0
            added = log_marginal(N + rows, S + var_sum[:, i], Q + var_sq[:, i], prior) - base
            delta = np.add.reduceat(added, offsets[:-1]) + (removed - ml[j])
            if prior.size_log_weight is not None:
                w = prior.log_assignment_prior
                for k in range(K):
                    delta[k] += (w(sizes[k] + 1) - w(sizes[k]) + w(sizes[j] - 1) - w(sizes[j]))
            delta[j] = 0.0
            target = None
            for k in np.lexsort((np.arange(K), -delta)):
                if not delta[k] > cfg.epsilon:
                    break
                if legal(i, int(k)):
                    target = int(k)
                    break
            if target is None:
                continue
            k = target
            old_j, old_k = cache.state(j), cache.state(k)
            trial = net.with_assignment(net.assignment.moved(i, k))
            new_j = module_state(values, net.trees[j], trial.members(j), prior)
            new_k = module_state(values, net.trees[k], trial.members(k), prior)
            gain = (new_j.score.total + new_k.score.total) - (old_j.score.total + old_k.score.total)
            if not gain > cfg.epsilon:
                continue
            net = trial
            assign[i] = k
            sizes[j] -= 1
            sizes[k] += 1
            cache.put(net, j, new_j)
            cache.put(net, k, new_k)
            refresh_flat(j)
            refresh_flat(k)
            changed = improved = True
            if trace is not None:
                trace.append(TraceRecord(iteration, "move", k, cache.total(),
                                         time.perf_counter() - clock))
        if not changed:
            break
    return net, improved


def learn(data, prior: PriorSpec, cfg: SearchConfig, init: ModuleNetwork
          ) -> tuple[ModuleNetwork, list[TraceRecord]]:
    """Alternate structure and assignment steps until neither commits.

    Returns the learned network, with posterior leaf parameters fitted, and
    the trace of committed operators (first record is the initial score).
    """
    if init.K != cfg.K:
        raise ValueError(f"initial network has K={init.K}, config has K={cfg.K}")
    values = _values(data)
    if init.n != values.shape[1]:
        raise ValueError(f"initial network covers {init.n} variables, data has {values.shape[1]}")
    _require_acyclic(init)
    net = init
    if net.var_names is None and hasattr(data, "var_names"):
        net = ModuleNetwork(net.assignment, net.trees, data.var_names,
                            getattr(data, "standardization", None))
    clock = time.perf_counter()
    ws = _Workspace(values, prior, cfg)
    cache = ScoreCache(values, net, prior)
    trace = [TraceRecord(0, "init", None, cache.total(), 0.0)]
    for it in range(1, cfg.max_outer_iters + 1):
        net, s_imp = structure_step(values, net, prior, cfg, cache=cache, workspace=ws,
                                    trace=trace, iteration=it, clock=clock)
        a_imp = False
        if not cfg.fixed_assignment:
            net, a_imp = assignment_step(values, net, prior, cfg, cache=cache, trace=trace,
                                         iteration=it, clock=clock)
        if not (s_imp or a_imp):
            break
    _require_acyclic(net)
    return fit_parameters(values, net, prior), trace
