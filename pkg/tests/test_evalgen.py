import math
from fractions import Fraction

import numpy as np
import pytest

from modnet.evaluation import (cross_validate, enrichment_pvalue, fold_indices, heldout_ll,
                               log_enrichment_pvalue, recovered_edge_fraction, top_module_mass)
from modnet.initialization import ConfigError
from modnet.model import (ModuleAssignment, ModuleNetwork, build_module_graph, check_acyclic,
                          ground_network, validate)
from modnet.scoring import PriorSpec, StateError, fit_parameters, total_score
from modnet.search import SearchConfig
from modnet.synthetic import GeneratorSpec, generate_truth, module_order, sample
from modnet.tree import LeafParams, RegressionTree, leaf_log_density

from conftest import DELL, HPQ, fitted, random_network, stock_network
from oracles import descend, exact_upper_tail, ground_edges, log_fraction

LOG_2PI = math.log(2 * math.pi)


def test_sampling_respects_the_module_chain(rng):
    net = fitted(stock_network(), rng)
    assert module_order(net) == [0, 1, 2]
    assert module_order(net.relabeled([2, 0, 1])) == [2, 0, 1]


def test_single_gaussian_moments():
    net = ModuleNetwork(ModuleAssignment((0,), 1),
                        (RegressionTree.single_leaf(LeafParams(0.0, 1.0)),))
    x = sample(net, 100_000, seed=3).values[:, 0]
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_sampling_is_seeded(rng):
    net = fitted(stock_network(), rng)
    assert sample(net, 20, seed=5) == sample(net, 20, seed=5)
    assert sample(net, 20, seed=5) != sample(net, 20, seed=6)


def test_sampling_needs_parameters():
    with pytest.raises(StateError):
        sample(stock_network(), 3)


def test_sampled_conditionals_follow_the_leaves(rng):
    net = fitted(stock_network(), rng)
    d = sample(net, 20_000, seed=2).values
    tree = net.trees[2]
    reached = tree.route(d)
    for leaf in tree.leaves():
        rows = reached == leaf
        p = tree.nodes[leaf].params
        for i in (DELL, HPQ):
            se = math.sqrt(p.variance / rows.sum())
            assert abs(d[rows, i].mean() - p.mean) < 5 * se


def test_default_generator_shape():
    truth = generate_truth(GeneratorSpec(n=100, K_true=10, seed=0))
    assert truth.K == 10 and truth.n == 100
    assert validate(truth) == []
    assert check_acyclic(build_module_graph(truth))
    for j in range(10):
        upstream = {i for i in range(100) if truth.assignment.assign[i] < j}
        assert truth.parents(j) <= upstream
        if j:
            assert 1 <= len(truth.parents(j)) <= 3
            assert 1 <= truth.trees[j].depth() <= 2


def test_unsatisfiable_generator_spec():
    with pytest.raises(ConfigError, match="unsatisfiable"):
        GeneratorSpec(n=3, K_true=3, min_parents=3, max_parents=3)


def test_generator_fuzz(rng):
    for _ in range(100):
        K = int(rng.integers(1, 8))
        spec = GeneratorSpec(n=int(rng.integers(K + 3, 40)), K_true=K,
                             min_parents=1, max_parents=int(rng.integers(1, 4)),
                             min_depth=1, max_depth=int(rng.integers(2, 4)),
                             seed=int(rng.integers(2**31)))
        truth = generate_truth(spec)
        assert validate(truth) == []
        assert check_acyclic(build_module_graph(truth))
        assert all(truth.trees[j].nodes[l].params.variance > 0
                   for j in range(K) for l in truth.trees[j].leaves())


def test_truth_beats_perturbations_on_its_own_sample():
    truth = generate_truth(GeneratorSpec(n=40, K_true=5, seed=8))
    d = sample(truth, 2000, seed=8)
    prior = PriorSpec()
    own = total_score(d, truth, prior).total
    rng = np.random.default_rng(8)
    for _ in range(20):
        assign = list(truth.assignment.assign)
        for i in rng.choice(40, size=3, replace=False):
            assign[i] = int(rng.integers(5))
        net = truth.with_assignment(ModuleAssignment(tuple(assign), 5))
        if not check_acyclic(build_module_graph(net)) or net.assignment == truth.assignment:
            continue
        assert total_score(d, net, prior).total < own


def test_heldout_at_the_mode():
    leaf = RegressionTree.single_leaf(LeafParams(1.5, 1.0))
    net = ModuleNetwork(ModuleAssignment((0, 0, 0), 1), (leaf,))
    assert heldout_ll(net, np.full((1, 3), 1.5)) == pytest.approx(-1.5 * LOG_2PI, abs=1e-12)


def test_heldout_needs_instances():
    net = fitted(stock_network(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        heldout_ll(net, np.zeros((0, 6)))


def test_heldout_matches_ground_network(rng):
    for _ in range(5):
        net = fitted(random_network(rng, 6, 3), rng)
        test = rng.normal(size=(25, 6))
        ground = ground_network(net)
        ref = sum(leaf_log_density(ground.cpds[i].nodes[descend(ground.cpds[i], row)].params,
                                   row[i]) for row in test for i in range(6))
        assert heldout_ll(net, test) == pytest.approx(ref / 25, rel=1e-12)


def test_truth_beats_single_module_out_of_sample():
    from modnet.evaluation import train
    truth = generate_truth(GeneratorSpec(n=30, K_true=4, seed=2))
    train_d, test_d = sample(truth, 100, seed=1), sample(truth, 500, seed=2)
    one, _ = train(train_d, PriorSpec(), SearchConfig(K=1))
    assert heldout_ll(truth, test_d) > heldout_ll(one, test_d)


def test_recovery_extremes(rng):
    truth = generate_truth(GeneratorSpec(n=30, K_true=4, seed=1))
    assert recovered_edge_fraction(truth, truth) == 1.0
    flat = ModuleNetwork.from_assignment(truth.assignment)
    assert recovered_edge_fraction(flat, truth) == 0.0
    with pytest.raises(ValueError):
        recovered_edge_fraction(truth, flat)


def test_recovery_hand_count():
    leaf = RegressionTree.single_leaf()
    # truth: 0 -> {1, 2}, 1 -> 3 ; learned: 0 -> {1, 3}, 2 -> 3
    truth = ModuleNetwork(ModuleAssignment((0, 1, 1, 2), 3),
                          (leaf, leaf.apply_split(0, 0, 0.0), leaf.apply_split(0, 1, 0.0)))
    learned = ModuleNetwork(ModuleAssignment((0, 1, 2, 1), 3),
                            (leaf, leaf.apply_split(0, 0, 0.0), leaf.apply_split(0, 0, 0.0)))
    assert ground_edges(truth.assignment.assign, truth.trees) == {(0, 1), (0, 2), (1, 3)}
    assert ground_edges(learned.assignment.assign, learned.trees) == {(0, 1), (0, 3), (0, 2)}
    assert recovered_edge_fraction(learned, truth) == pytest.approx(2 / 3)


def test_top_module_mass_examples(rng):
    sizes = (50, 30, 10, 5, 5)
    assign = tuple(j for j, s in enumerate(sizes) for _ in range(s))
    net = ModuleNetwork.from_assignment(ModuleAssignment(assign, 5))
    assert top_module_mass(net, 2) == pytest.approx(0.8)
    assert top_module_mass(net, 5) == 1.0 == top_module_mass(net, 10)
    for _ in range(20):
        K = int(rng.integers(1, 15))
        a = ModuleAssignment(tuple(int(v) for v in rng.integers(0, K, 40)), K)
        top = int(rng.integers(1, 12))
        counts = sorted((a.assign.count(j) for j in range(K)), reverse=True)
        net = ModuleNetwork.from_assignment(a)
        assert top_module_mass(net, top) == sum(counts[:top]) / 40


def test_fold_indices_partition_and_balance():
    labels = fold_indices(23, 5, seed=3)
    assert sorted(set(labels)) == list(range(5))
    assert sorted(np.bincount(labels)) == [4, 4, 5, 5, 5]
    assert np.array_equal(labels, fold_indices(23, 5, seed=3))
    with pytest.raises(ConfigError):
        fold_indices(3, 5)
    with pytest.raises(ConfigError):
        fold_indices(10, 1)


def test_leave_one_out_on_tiny_data(rng):
    x = rng.normal(size=(6, 3))
    rep = cross_validate(x, PriorSpec(), SearchConfig(K=2), folds=6, baseline=False)
    assert [r.test_size for r in rep.folds] == [1] * 6
    assert sorted(r.fold for r in rep.folds) == list(range(6))
    assert all(r.train_size == 5 for r in rep.folds)
    assert math.isfinite(rep.heldout_ll_per_instance)


def test_cross_validation_reports_baseline_difference():
    truth = generate_truth(GeneratorSpec(n=20, K_true=3, seed=4))
    d = sample(truth, 60, seed=4)
    rep = cross_validate(d, PriorSpec(), SearchConfig(K=3), folds=3, seed=1)
    assert len(rep.folds) == 3 and rep.failures == 0
    for r in rep.folds:
        assert r.diff == r.heldout_ll - r.baseline_ll
    assert rep.heldout_ll_per_instance == pytest.approx(np.mean([r.heldout_ll for r in rep.folds]))
    assert rep == cross_validate(d, PriorSpec(), SearchConfig(K=3), folds=3, seed=1)


def test_enrichment_trivial_cases():
    assert enrichment_pvalue(100, 10, 5, 0) == 1.0
    for hits in range(6):
        assert enrichment_pvalue(50, 50, 5, hits) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        enrichment_pvalue(10, 3, 5, 4)
    with pytest.raises(ValueError):
        enrichment_pvalue(10, 3, 11, 1)


def test_enrichment_matches_exact_rational(rng):
    for _ in range(30):
        N = int(rng.integers(5, 300))
        A = int(rng.integers(0, N + 1))
        n = int(rng.integers(0, N + 1))
        k = int(rng.integers(0, min(A, n) + 1))
        exact = exact_upper_tail(N, A, n, k)
        if exact == 0:
            continue
        assert log_enrichment_pvalue(N, A, n, k) == pytest.approx(log_fraction(exact), rel=1e-9,
                                                                  abs=1e-12)


def test_enrichment_monotone_in_hits():
    ps = [enrichment_pvalue(2355, 26, 10, k) for k in range(11)]
    assert all(b <= a for a, b in zip(ps, ps[1:]))
    assert Fraction(1) == exact_upper_tail(2355, 26, 10, 0)
