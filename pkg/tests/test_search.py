import math

import numpy as np
import pytest

from modnet.initialization import initialize
from modnet.io import model_to_json
from modnet.model import ModuleAssignment, ModuleNetwork, build_module_graph, check_acyclic
from modnet.scoring import PriorSpec, module_score, total_score
from modnet.search import (ScoreCache, SearchConfig, assignment_step, delta_rescore, learn,
                           structure_step)
from modnet.synthetic import GeneratorSpec, generate_truth, sample
from modnet.tree import RegressionTree

from conftest import random_network
from oracles import (improving_moves, observed_thresholds, reference_module_score,
                     reference_total_score)


def strictly_increasing(trace, epsilon):
    scores = [r.score for r in trace]
    return all(b - a > epsilon for a, b in zip(scores, scores[1:]))


def test_config_rejects_bad_values():
    for bad in ({"K": 0}, {"K": 2, "lookahead": 0}, {"K": 2, "beam_width": 0},
                {"K": 2, "epsilon": -1.0}, {"K": 2, "epsilon": math.nan}):
        with pytest.raises(ValueError):
            SearchConfig(**bad)


def best_single_split_gain(x, net, prior, min_leaf):
    """Largest exact score gain of any one legal split of a single-leaf module."""
    leaf = RegressionTree.single_leaf()
    M = x.shape[0]
    best = -math.inf
    for j in range(net.K):
        members = net.members(j)
        base = reference_module_score(x, leaf, members, prior)
        for v in (v for v in range(net.n) if net.assignment.assign[v] != j):
            for u in observed_thresholds(x[:, v], range(M)):
                below = int((x[:, v] < u).sum())
                if min(below, M - below) * len(members) < min_leaf:
                    continue
                best = max(best, reference_module_score(x, leaf.apply_split(0, v, u), members,
                                                        prior) - base)
    return best


def test_pure_noise_commits_exactly_when_a_split_pays(rng):
    # the maximum over hundreds of noise splits usually clears the Occam factor,
    # so the check is agreement with brute force rather than a quiet rate
    prior = PriorSpec()
    cfg = SearchConfig(K=2, lookahead=1)
    for seed in (4, 8, 11, 12):
        x = np.random.default_rng(seed).normal(size=(100, 8))
        net = ModuleNetwork.from_assignment(ModuleAssignment((0, 0, 0, 0, 1, 1, 1, 1), 2))
        out, improved = structure_step(x, net, prior, cfg)
        assert improved == (best_single_split_gain(x, net, prior, cfg.min_leaf) > cfg.epsilon)
        assert improved == any(t.complexity().interior for t in out.trees)


def test_step_function_split_lands_in_the_gap(rng):
    M = 60
    p = rng.normal(size=M)
    x = np.empty((M, 4))
    x[:, 0] = p
    for i in (1, 2, 3):
        x[:, i] = np.where(p < 0, 1.0, -1.0) + 0.05 * rng.normal(size=M)
    net = ModuleNetwork.from_assignment(ModuleAssignment((0, 1, 1, 1), 2))
    prior = PriorSpec()
    out, improved = structure_step(x, net, prior, SearchConfig(K=2))
    assert improved
    root = out.trees[1].nodes[0]
    assert root.var == 0
    assert p[p < 0].max() < root.threshold <= p[p >= 0].min()
    # exhaustive single-split enumeration agrees on the argmax
    members = net.members(1)
    leaf = RegressionTree.single_leaf()
    scored = [(reference_module_score(x, leaf.apply_split(0, v, u), members, prior), -v, -u)
              for v in (0,) for u in observed_thresholds(x[:, v], range(M))]
    best = max(scored)
    assert (-best[1], -best[2]) == (root.var, root.threshold)


def test_split_closing_a_cycle_is_never_committed(rng):
    M = 80
    x = rng.normal(size=(M, 4))
    # module 1 members track variable 0 sharply, but module 0 already tests variable 2
    x[:, 2] = np.where(x[:, 0] < 0, 2.0, -2.0) + 0.05 * rng.normal(size=M)
    x[:, 3] = np.where(x[:, 0] < 0, 2.0, -2.0) + 0.05 * rng.normal(size=M)
    x[:, 1] = np.where(x[:, 2] < 0, 1.0, -1.0) + 0.05 * rng.normal(size=M)
    leaf = RegressionTree.single_leaf()
    net = ModuleNetwork(ModuleAssignment((0, 0, 1, 1), 2), (leaf.apply_split(0, 2, 0.0), leaf))
    out, _ = structure_step(x, net, PriorSpec(), SearchConfig(K=2))
    assert not out.trees[1].complexity().tested_vars & {0, 1}
    assert check_acyclic(build_module_graph(out))
    # the banned split really would have helped
    prior = PriorSpec()
    cyclic = leaf.apply_split(0, 0, float(x[x[:, 0] >= 0, 0].min()))
    assert (reference_module_score(x, cyclic, (2, 3), prior)
            > reference_module_score(x, leaf, (2, 3), prior) + 50)


def test_structure_step_respects_max_depth(rng):
    truth = generate_truth(GeneratorSpec(n=20, K_true=3, seed=3))
    d = sample(truth, 200, seed=3)
    net = ModuleNetwork.from_assignment(truth.assignment)
    out, _ = structure_step(d, net, PriorSpec(), SearchConfig(K=3, max_depth=1))
    assert all(t.depth() <= 1 for t in out.trees)


def test_assignment_step_single_module_is_a_no_op(rng):
    x = rng.normal(size=(20, 4))
    net = ModuleNetwork.from_assignment(ModuleAssignment((0,) * 4, 1))
    out, improved = assignment_step(x, net, PriorSpec(), SearchConfig(K=1))
    assert out is net and not improved


def test_assignment_step_moves_misplaced_variable(rng):
    M = 40
    # single-leaf modules pool marginals, so the groups differ in location
    x = np.concatenate([rng.normal(3, 0.3, size=(M, 2)), rng.normal(-3, 0.3, size=(M, 3))], axis=1)
    start = (0, 0, 1, 0, 1)
    net = ModuleNetwork.from_assignment(ModuleAssignment(start, 2))
    prior = PriorSpec()
    out, improved = assignment_step(x, net, prior, SearchConfig(K=2))
    assert improved
    assert out.assignment.assign == (0, 0, 1, 1, 1)
    leaves = [RegressionTree.single_leaf()] * 2
    assert (reference_total_score(x, (0, 0, 1, 1, 1), leaves, prior)
            > reference_total_score(x, start, leaves, prior))


def test_assignment_step_rejects_cyclic_destination(rng):
    M = 50
    x = rng.normal(size=(M, 6))
    # variable 1 is a copy of module 1's members, so moving it there scores best
    x[:, 1] = x[:, 4] = x[:, 5] = rng.normal(size=M)
    x[:, 4] += 0.01 * rng.normal(size=M)
    x[:, 5] += 0.01 * rng.normal(size=M)
    leaf = RegressionTree.single_leaf()
    # module 0 = {0, 3} tests variable 1; module 1 = {4, 5} tests variable 0; module 2 = {1, 2}
    assign = (0, 2, 2, 0, 1, 1)
    trees = (leaf.apply_split(0, 1, 0.0), leaf.apply_split(0, 0, 0.0), leaf)
    net = ModuleNetwork(ModuleAssignment(assign, 3), trees)
    prior = PriorSpec()
    moved = (0, 1, 2, 0, 1, 1)
    assert (reference_total_score(x, moved, trees, prior)
            > reference_total_score(x, assign, trees, prior))
    out, _ = assignment_step(x, net, prior, SearchConfig(K=3))
    assert out.assignment.assign[1] != 1
    assert check_acyclic(build_module_graph(out))


def test_assignment_step_never_lowers_score(rng):
    prior = PriorSpec()
    for _ in range(10):
        x = rng.normal(size=(30, 7))
        net = random_network(rng, 7, 3, x)
        before = total_score(x, net, prior).total
        trace = []
        out, _ = assignment_step(x, net, prior, SearchConfig(K=3), trace=trace)
        after = total_score(x, out, prior).total
        assert after >= before
        scores = [before] + [r.score for r in trace]
        assert all(b > a for a, b in zip(scores, scores[1:]))
        assert check_acyclic(build_module_graph(out))


def test_learn_with_infinite_epsilon_returns_init(rng):
    x = rng.normal(size=(30, 5))
    init = ModuleNetwork.from_assignment(ModuleAssignment((0, 1, 0, 1, 0), 2))
    net, trace = learn(x, PriorSpec(), SearchConfig(K=2, epsilon=math.inf), init)
    assert net.assignment == init.assignment
    assert all(len(t.leaves()) == 1 for t in net.trees)
    assert len(trace) == 1 and trace[0].kind == "init"


def test_learn_rejects_mismatched_init(rng):
    x = rng.normal(size=(10, 3))
    init = ModuleNetwork.from_assignment(ModuleAssignment((0, 1, 0), 2))
    with pytest.raises(ValueError):
        learn(x, PriorSpec(), SearchConfig(K=3), init)


@pytest.mark.parametrize("seed", range(4))
def test_learn_trace_is_strictly_increasing(seed):
    truth = generate_truth(GeneratorSpec(n=30, K_true=4, seed=seed))
    d = sample(truth, 200, seed=seed)
    prior = PriorSpec()
    init = ModuleNetwork.from_assignment(initialize(d, prior, 4))
    cfg = SearchConfig(K=4)
    net, trace = learn(d, prior, cfg, init)
    assert trace[0].score == pytest.approx(total_score(d, init, prior).total, rel=1e-12)
    assert strictly_increasing(trace, cfg.epsilon)
    assert trace[-1].score == pytest.approx(total_score(d, net, prior).total, rel=1e-12)
    assert check_acyclic(build_module_graph(net))


def test_learn_stops_at_a_local_maximum(rng):
    prior = PriorSpec()
    for _ in range(3):
        truth = generate_truth(GeneratorSpec(n=7, K_true=2, seed=int(rng.integers(1000))))
        d = sample(truth, 25, seed=int(rng.integers(1000)))
        cfg = SearchConfig(K=2, min_leaf=3)
        net, _ = learn(d, prior, cfg, ModuleNetwork.from_assignment(initialize(d, prior, 2)))
        assert improving_moves(d.values, net.assignment.assign, net.trees, prior,
                               cfg.epsilon, cfg.min_leaf) == []


def test_learn_is_deterministic():
    truth = generate_truth(GeneratorSpec(n=25, K_true=3, seed=11))
    d = sample(truth, 150, seed=11)
    prior = PriorSpec()
    runs = []
    for _ in range(2):
        init = ModuleNetwork.from_assignment(initialize(d, prior, 3))
        net, trace = learn(d, prior, SearchConfig(K=3), init)
        runs.append((model_to_json(net), [(r.iteration, r.kind, r.module, r.score)
                                          for r in trace]))
    assert runs[0] == runs[1]


def test_wider_beam_is_also_monotone():
    truth = generate_truth(GeneratorSpec(n=20, K_true=3, seed=5))
    d = sample(truth, 120, seed=5)
    prior = PriorSpec()
    cfg = SearchConfig(K=3, beam_width=3)
    net, trace = learn(d, prior, cfg, ModuleNetwork.from_assignment(initialize(d, prior, 3)))
    assert strictly_increasing(trace, cfg.epsilon)


def test_cache_matches_recompute_after_random_edits(rng):
    prior = PriorSpec(lambda_s=0.5)
    for _ in range(100):
        n, K = 6, 3
        x = rng.normal(size=(25, n))
        net = random_network(rng, n, K, x)
        cache = ScoreCache(x, net, prior)
        for _ in range(3):
            if rng.random() < 0.5:
                i, k = int(rng.integers(n)), int(rng.integers(K))
                j = net.assignment.assign[i]
                net = net.with_assignment(net.assignment.moved(i, k))
                touched = {j, k}
            else:
                j = int(rng.integers(K))
                t = net.trees[j]
                net = net.with_tree(j, t.apply_split(int(rng.choice(t.leaves())),
                                                     int(rng.integers(n)), float(rng.normal())))
                touched = {j}
            before = cache.scores()
            delta_rescore(cache, x, net, touched)
            after = cache.scores()
            assert [a for k, (a, b) in enumerate(zip(before, after))
                    if a != b and k not in touched] == []
            assert after == [module_score(x, net, k, prior) for k in range(K)]
