import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats

from addbart import _kernels as K
from addbart.data import CutpointGrid, build_cutpoints
from addbart.trees import (DecisionTree, LeafStats, MoveProbabilities, SufficientStats, TreePrior,
                           draw_leaf_values, evaluate, leaf_log_marginal, leaf_posterior,
                           log_acceptance, mh_step, prior_leaf_counts, proposal_log_prob,
                           sample_tree_from_prior, sum_evaluate, tree_log_prior)

import oracles

# two small trees: the first splits X1 at 4, then X2 at 4; the second X2 at 2, then X1 at 1
FIRST_TREE = {"var": 0, "split": 4.0,
             "left": {"value": 10.0},
             "right": {"var": 1, "split": 4.0, "left": {"value": 20.0}, "right": {"value": 30.0}}}
SECOND_TREE = {"var": 1, "split": 2.0,
              "left": {"var": 0, "split": 1.0, "left": {"value": 20.0}, "right": {"value": 40.0}},
              "right": {"value": 60.0}}


def test_two_tree_evaluation():
    left, right = DecisionTree.from_nested(FIRST_TREE), DecisionTree.from_nested(SECOND_TREE)
    x = np.array([5.0, 3.0])
    assert evaluate(left, x) == 20.0
    assert evaluate(right, x) == 60.0
    assert sum_evaluate([left, right], x) == 80.0


def test_two_tree_sum_regions():
    forest = [DecisionTree.from_nested(FIRST_TREE), DecisionTree.from_nested(SECOND_TREE)]
    pts = {(0.5, 1.0): 30, (2.0, 1.0): 50, (0.5, 3.0): 70, (5.0, 1.0): 60, (5.0, 3.0): 80,
           (5.0, 5.0): 90}
    x = np.array(list(pts))
    np.testing.assert_array_equal(sum_evaluate(forest, x), list(pts.values()))


def test_trivial_evaluations():
    assert evaluate(DecisionTree.leaf(7.0), np.array([1.0, -3.0])) == 7.0
    assert sum_evaluate([], np.array([1.0])) == 0.0
    assert sum_evaluate([DecisionTree.leaf(1.5), DecisionTree.leaf(1.5)], np.zeros(2)) == 3.0


def test_tree_structure_invariants():
    t = DecisionTree.from_nested(SECOND_TREE)
    assert t.n_leaves == t.n_interior + 1 == 3
    with pytest.raises(ValueError):
        DecisionTree([0, K.LEAF, K.EMPTY], [1.0, np.nan, np.nan], [0, 0, 0])


def test_json_round_trip():
    grid = CutpointGrid((np.array([1.0, 4.0]), np.array([2.0, 4.0])))
    t = DecisionTree.from_nested(FIRST_TREE, grid)
    back = DecisionTree.from_json(t.to_json(), grid)
    assert back == t
    np.testing.assert_array_equal(back.cut, t.cut)


def test_split_probability_decreasing():
    p = TreePrior()
    probs = [p.split_probability(d) for d in range(12)]
    assert all(0 < a < 1 for a in probs)
    assert all(a >= b for a, b in zip(probs, probs[1:]))


def _wide_grid(p=10, cuts=100):
    return CutpointGrid(tuple(np.arange(cuts, dtype=float) for _ in range(p)))


def _categories(counts):
    return np.array([np.mean(counts == b) for b in (1, 2, 3, 4)] + [np.mean(counts >= 5)])


def test_prior_leaf_counts_match_exact_law():
    prior = TreePrior()
    law = oracles.leaf_count_distribution(prior.base, prior.power, prior.max_depth)
    exact = np.append(law[1:5], law[5:].sum())
    n = 100_000
    emp = _categories(prior_leaf_counts(prior, _wide_grid(), n, np.random.default_rng(0)))
    se = np.sqrt(exact * (1 - exact) / n)
    assert np.all(np.abs(emp - exact) < 3 * se), (emp, exact)


def test_sample_tree_from_prior_law():
    prior = TreePrior(leaf_sd=0.3)
    grid = _wide_grid(3, 50)
    rng = np.random.default_rng(1)
    trees = [sample_tree_from_prior(prior, grid, rng) for _ in range(4000)]
    law = oracles.leaf_count_distribution(prior.base, prior.power, prior.max_depth)
    exact = np.append(law[1:5], law[5:].sum())
    emp = _categories(np.array([t.n_leaves for t in trees]))
    se = np.sqrt(exact * (1 - exact) / len(trees))
    assert np.all(np.abs(emp - exact) < 4 * se)
    vals = np.concatenate([t.value[t.leaves] for t in trees])
    assert abs(vals.std() - 0.3) < 0.01


def test_no_growth_when_base_zero():
    rng = np.random.default_rng(0)
    prior = TreePrior(base=0.0)
    assert all(sample_tree_from_prior(prior, _wide_grid(2, 5), rng).n_leaves == 1
               for _ in range(200))


def test_prior_respects_available_rules():
    # one column with a single cutpoint: at most one split anywhere in the tree
    prior = TreePrior(base=0.95, power=0.0)
    counts = prior_leaf_counts(prior, CutpointGrid((np.array([0.0]),)), 20_000,
                               np.random.default_rng(2))
    assert set(np.unique(counts)) == {1, 2}
    assert abs(np.mean(counts == 2) - 0.95) < 0.01


def test_tree_log_prior_matches_enumeration():
    grid = CutpointGrid((np.array([0.0]), np.array([0.0, 1.0])))
    prior = TreePrior(base=0.9, power=1.0, max_depth=2)
    trees = oracles.enumerate_trees([1, 2], 2, 0.9, 1.0)
    assert math.isclose(sum(math.exp(lp) for _, lp in trees), 1.0, rel_tol=1e-12)
    for t, lp in trees:
        var = np.full(prior.n_nodes, K.EMPTY, dtype=np.int64)
        cut = np.zeros(prior.n_nodes, dtype=np.int64)
        for node, rule in t.items():
            if rule == "leaf":
                var[node] = K.LEAF
            else:
                var[node], cut[node] = rule
        tree = DecisionTree.from_arrays(var, cut, np.zeros(prior.n_nodes), grid)
        assert math.isclose(tree_log_prior(tree, prior, grid), lp, rel_tol=1e-12)


# --- conjugate leaf integral ------------------------------------------------


def _stats(r):
    r = np.asarray(r, dtype=float)
    return LeafStats(len(r), float(r.sum()), float(r @ r))


def test_leaf_marginal_single_zero():
    want = math.log(1 / math.sqrt(2 * math.pi)) + 0.5 * math.log(0.5)
    assert abs(leaf_log_marginal(_stats([0.0]), 1.0, 1.0) - want) < 1e-12
    assert abs(oracles.quadrature_log_marginal([0.0], 1.0, 1.0) - want) < 1e-8


def test_leaf_marginal_three_points():
    r = [1.0, -1.0, 2.0]
    got = leaf_log_marginal(_stats(r), 2.0, math.sqrt(0.5))
    assert abs(got - oracles.quadrature_log_marginal(r, 2.0, math.sqrt(0.5))) < 1e-8
    assert abs(got - oracles.gaussian_leaf_log_marginal(r, 2.0, 0.5)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(0.1, 5.0),
       st.floats(0.1, 3.0))
def test_leaf_marginal_random_quadrature(r, sigma2, leaf_sd):
    got = leaf_log_marginal(_stats(r), sigma2, leaf_sd)
    assert abs(got - oracles.quadrature_log_marginal(r, sigma2, leaf_sd)) < 1e-8


def test_leaf_marginal_collapsed_prior():
    r = np.array([0.3, -1.2, 2.5])
    want = stats.norm.logpdf(r, 0, math.sqrt(1.7)).sum()
    assert abs(leaf_log_marginal(_stats(r), 1.7, 1e-9) - want) < 1e-9
    with pytest.raises(ValueError):
        leaf_log_marginal(_stats(r), 0.0, 1.0)


def test_leaf_posterior_against_mode_search():
    st_ = LeafStats(4, 8.0, 20.0)
    mean, var = leaf_posterior(st_, 1.0, 1.0)
    assert (mean, var) == pytest.approx((8 / 5, 1 / 5), abs=1e-15)

    def neg_log_post(mu):
        return 0.5 * (st_.q - 2 * mu * st_.s + st_.n * mu * mu) + 0.5 * mu * mu

    res = optimize.minimize_scalar(neg_log_post, tol=1e-12)
    h = 1e-4
    curv = (neg_log_post(res.x + h) - 2 * neg_log_post(res.x) + neg_log_post(res.x - h)) / h ** 2
    assert abs(res.x - mean) < 1e-7
    assert abs(1 / curv - var) < 1e-6


def test_draw_leaf_values_moments():
    tree = DecisionTree.leaf()
    sst = SufficientStats({0: LeafStats(4, 8.0, 20.0)})
    rng = np.random.default_rng(5)
    draws = np.array([draw_leaf_values(tree, sst, 1.0, 1.0, rng).value[0] for _ in range(40_000)])
    assert abs(draws.mean() - 1.6) < 4 * math.sqrt(0.2 / len(draws))
    assert abs(draws.var() - 0.2) < 0.006


def test_flat_leaf_prior_limit():
    mean, _ = leaf_posterior(LeafStats(4, 8.0, 20.0), 1.0, 1e6)
    assert abs(mean - 2.0) < 1e-9


def test_draw_leaf_values_rejects_empty_leaf():
    with pytest.raises(ValueError):
        draw_leaf_values(DecisionTree.leaf(), SufficientStats({0: LeafStats(0, 0.0, 0.0)}),
                         1.0, 1.0, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_piecewise_constant(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((80, 3))
    grid = build_cutpoints(x, 8)
    tree = sample_tree_from_prior(TreePrior(base=0.95, power=0.5), grid, rng)
    leaf = tree.leaf_index(x)
    out = evaluate(tree, x)
    for b in np.unique(leaf):
        assert np.all(out[leaf == b] == out[leaf == b][0])
    sst = SufficientStats.compute(tree, x, rng.standard_normal(80))
    assert sum(s.n for s in sst.values()) == 80


# --- Metropolis-Hastings kernel --------------------------------------------


def test_prune_impossible_on_root_leaf():
    # a single leaf can only grow; every proposal is a GROW
    x = np.array([[0.0], [1.0]])
    grid = build_cutpoints(x)
    prior = TreePrior(max_depth=3)
    rng = np.random.default_rng(0)
    root = DecisionTree.from_arrays(np.array([K.LEAF]), np.zeros(1), np.zeros(1), grid)
    outs = {mh_step(root, x, np.array([5.0, -5.0]), 1.0, prior, grid, rng).n_leaves
            for _ in range(50)}
    assert outs <= {1, 2} and 2 in outs


def _small_problem():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 2.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    grid = build_cutpoints(x)
    r = np.array([1.0, 1.2, -0.5, -1.0, 2.0, 0.3])
    return x, grid, r


def _neighbours(tree, grid, prior):
    """All trees one grow, prune or change move away from ``tree``."""
    out = []
    var, cut, val = tree.padded(prior.n_nodes)
    for i in np.flatnonzero(var != K.EMPTY):
        if var[i] == K.LEAF and K.node_depth(i) < prior.max_depth:
            for v in range(grid.p):
                for c in range(grid.counts[v]):
                    v2, c2 = var.copy(), cut.copy()
                    v2[i], c2[i] = v, c
                    v2[2 * i + 1] = v2[2 * i + 2] = K.LEAF
                    out.append((v2, c2))
        if var[i] >= 0:
            if var[2 * i + 1] == K.LEAF and var[2 * i + 2] == K.LEAF:
                v2 = var.copy()
                v2[i], v2[2 * i + 1], v2[2 * i + 2] = K.LEAF, K.EMPTY, K.EMPTY
                out.append((v2, cut.copy()))
            for v in range(grid.p):
                for c in range(grid.counts[v]):
                    if (v, c) != (var[i], cut[i]):
                        v2, c2 = var.copy(), cut.copy()
                        v2[i], c2[i] = v, c
                        out.append((v2, c2))
    trees = []
    for v2, c2 in out:
        t = DecisionTree.from_arrays(v2, c2, val, grid)
        if math.isfinite(tree_log_prior(t, prior, grid)):
            trees.append(t)
    return trees


def test_grow_prune_reversibility():
    x, grid, r = _small_problem()
    prior = TreePrior(base=0.95, power=1.0, max_depth=2, leaf_sd=1.0)
    t0 = DecisionTree.from_arrays(np.array([0, K.LEAF, K.LEAF]), np.array([0, 0, 0]),
                                  np.zeros(3), grid)
    checked = 0
    for t1 in _neighbours(t0, grid, prior):
        a = log_acceptance(t0, t1, x, r, 0.5, prior, grid)
        b = log_acceptance(t1, t0, x, r, 0.5, prior, grid)
        if math.isfinite(a):
            assert abs(a + b) < 1e-12
            checked += 1
    assert checked >= 4


def test_kernel_transition_frequencies():
    # one-step frequencies of mh_step equal q(T'|T) * min(1, ratio) for every neighbour
    x, grid, r = _small_problem()
    prior = TreePrior(base=0.95, power=1.0, max_depth=2, leaf_sd=1.0)
    t0 = DecisionTree.from_arrays(np.array([1, 0, K.LEAF, K.LEAF, K.LEAF, K.EMPTY, K.EMPTY]),
                                  np.array([0, 0, 0, 0, 0, 0, 0]), np.zeros(7), grid)
    expected = {}
    for t1 in _neighbours(t0, grid, prior):
        la = log_acceptance(t0, t1, x, r, 0.5, prior, grid)
        if math.isfinite(la):
            expected[t1.to_json()] = math.exp(proposal_log_prob(t0, t1, prior, grid)
                                              + min(0.0, la))
    n = 30_000
    rng = np.random.default_rng(11)
    counts = Counter(mh_step(t0, x, r, 0.5, prior, grid, rng).to_json() for _ in range(n))
    for key, p in expected.items():
        se = math.sqrt(p * (1 - p) / n)
        assert abs(counts.get(key, 0) / n - p) < 4 * se + 1e-4, key
    stay = 1.0 - sum(expected.values())
    assert abs(counts.get(t0.to_json(), 0) / n - stay) < 4 * math.sqrt(stay * (1 - stay) / n)


def test_two_point_detailed_balance_public_api():
    x = np.array([[0.0], [1.0]])
    grid = build_cutpoints(x)
    r = np.array([1.5, -0.4])
    prior = TreePrior(base=0.95, power=2.0, max_depth=2, leaf_sd=0.8)
    exact = oracles.tree_posterior(grid.bin(x), [1], r, 1.0, 0.64, 2, 0.95, 2.0)
    rng = np.random.default_rng(4)
    tree = DecisionTree.from_arrays(np.array([K.LEAF]), np.zeros(1), np.zeros(1), grid)
    leaves = []
    for _ in range(40_000):
        tree = mh_step(tree, x, r, 1.0, prior, grid, rng)
        tree = draw_leaf_values(tree, SufficientStats.compute(tree, x, r), 1.0, 0.8, rng)
        leaves.append(tree.n_leaves)
    p_split = exact[((0, (0, 0)),)]
    assert abs(np.mean(np.array(leaves) == 2) - p_split) < 0.01


def test_enumerated_posterior_total_variation():
    bins = np.array([[0, 0], [0, 1], [1, 2], [1, 0], [0, 2], [1, 1]], dtype=np.int64)
    ncuts = np.array([1, 2], dtype=np.int64)
    r = np.array([1.0, 1.2, -0.5, -1.0, 2.0, 0.3])
    sigma2, tau2 = 0.5, 1.0
    exact = oracles.tree_posterior(bins, ncuts, r, sigma2, tau2, 2, 0.95, 1.0)
    n_nodes = 7
    var = np.full(n_nodes, K.EMPTY, dtype=np.int64)
    var[0] = K.LEAF
    cut = np.zeros(n_nodes, dtype=np.int64)
    states, _ = K.tree_chain(var, cut, 1, bins, ncuts, r, np.full(6, 1 / sigma2), 1 / tau2,
                             0.95, 1.0, 2, 0.25, 0.25, 0.5, 1_000_000, n_nodes,
                             np.random.default_rng(0))
    counts = Counter(oracles.key_from_arrays(s[:n_nodes], s[n_nodes:]) for s in states)
    n = states.shape[0]
    tv = 0.5 * sum(abs(counts.get(k, 0) / n - p) for k, p in exact.items())
    tv += 0.5 * sum(c / n for k, c in counts.items() if k not in exact)
    assert tv < 0.02


def test_incremental_leaf_membership_matches_recompute():
    from addbart._gibbs import make_block
    rng = np.random.default_rng(3)
    x = rng.standard_normal((150, 3))
    y = np.sin(2 * x[:, 0]) + x[:, 1] * x[:, 2]
    b = make_block("all", x, [0, 1, 2], 10, 0.3, 6, 20)
    w = np.ones(150)
    tab = K.depth_table(b.var.shape[1])
    for _ in range(30):
        K.sweep(b.var, b.cut, b.val, b.leaf_of, b.top, b.fit, b.bins, b.grid.counts, y, w,
                b.leaf_prec, 0.95, 2.0, b.max_depth, 0.25, 0.25, 0.5, rng, tab, b.tally)
        for j in range(b.m):
            np.testing.assert_array_equal(b.leaf_of[j],
                                          K.route(b.var[j], b.cut[j], b.bins, np.arange(150), 0))
            occupied = set(np.unique(b.leaf_of[j]).tolist())
            assert occupied == set(np.flatnonzero(b.var[j] == K.LEAF).tolist())


def test_move_probabilities_validation():
    with pytest.raises(ValueError):
        MoveProbabilities(grow=0.0)
