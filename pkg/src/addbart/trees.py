"""Regression trees, the depth-dependent tree prior, and the per-tree MCMC moves."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .data import CutpointGrid

LEAF = K.LEAF
EMPTY = K.EMPTY


@dataclass(frozen=True)
class TreePrior:
    """Tree-shape prior ``P(split at depth d) = base * (1 + d)**(-power)`` and leaf prior scale."""

    base: float = 0.95
    power: float = 2.0
    leaf_sd: float = 1.0
    max_depth: int = 10

    def __post_init__(self):
        if not 0.0 <= self.base < 1.0:
            raise ValueError("base must lie in [0, 1)")
        if self.power < 0:
            raise ValueError("power must be >= 0")
        if self.leaf_sd <= 0:
            raise ValueError("leaf_sd must be positive")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def split_probability(self, depth: int) -> float:
        return self.base * (1.0 + depth) ** (-self.power)

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.max_depth + 1) - 1


class DecisionTree:
    """Binary regression tree stored in heap order.

    ``var[i]`` holds the split column of an interior node, ``LEAF`` or
    ``EMPTY``; ``split[i]`` the threshold (rows with ``x < split`` go left);
    ``value[i]`` the leaf value. ``cut`` optionally carries the thresholds as
    indices into a :class:`CutpointGrid`, which the MCMC moves require.
    """

    __slots__ = ("var", "split", "value", "cut")

    def __init__(self, var, split, value, cut=None):
        self.var = np.asarray(var, dtype=np.int64)
        self.split = np.asarray(split, dtype=float)
        self.value = np.asarray(value, dtype=float)
        self.cut = None if cut is None else np.asarray(cut, dtype=np.int64)
        if not (self.var.shape == self.split.shape == self.value.shape):
            raise ValueError("node arrays must have equal length")
        self._check()

    def _check(self):
        var = self.var
        if var.shape[0] == 0 or var[0] == EMPTY:
            raise ValueError("tree has no root")
        for i in range(var.shape[0]):
            if var[i] >= 0:
                left, right = 2 * i + 1, 2 * i + 2
                if right >= var.shape[0] or var[left] == EMPTY or var[right] == EMPTY:
                    raise ValueError(f"interior node {i} lacks two children")
            elif var[i] == EMPTY and i > 0 and var[(i - 1) // 2] >= 0:
                raise ValueError(f"node {i} missing below interior parent")

    @classmethod
    def leaf(cls, mu: float = 0.0) -> "DecisionTree":
        return cls([LEAF], [np.nan], [mu], [-1])

    @classmethod
    def from_nested(cls, spec: dict, grid: CutpointGrid | None = None) -> "DecisionTree":
        """Build from ``{"var": j, "split": s, "left": ..., "right": ...}`` / ``{"value": mu}``."""
        nodes = {}

        def walk(node, i):
            nodes[i] = node
            if "value" not in node:
                walk(node["left"], 2 * i + 1)
                walk(node["right"], 2 * i + 2)

        walk(spec, 0)
        size = max(nodes) + 1
        var = np.full(size, EMPTY, dtype=np.int64)
        split = np.full(size, np.nan)
        value = np.zeros(size)
        cut = np.full(size, -1, dtype=np.int64)
        for i, node in nodes.items():
            if "value" in node:
                var[i] = LEAF
                value[i] = float(node["value"])
            else:
                var[i] = int(node["var"])
                split[i] = float(node["split"])
                if grid is not None:
                    cut[i] = grid.index_of(var[i], split[i])
        return cls(var, split, value, cut if grid is not None else None)

    def to_nested(self) -> dict:
        def walk(i):
            if self.var[i] == LEAF:
                return {"kind": "leaf", "value": float(self.value[i])}
            return {"kind": "split", "var": int(self.var[i]), "split": float(self.split[i]),
                    "left": walk(2 * i + 1), "right": walk(2 * i + 2)}
        return walk(0)

    def to_json(self) -> str:
        return json.dumps(self.to_nested(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str, grid: CutpointGrid | None = None) -> "DecisionTree":
        return cls.from_nested(json.loads(text), grid)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.var == LEAF))

    @property
    def n_interior(self) -> int:
        return int(np.sum(self.var >= 0))

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.var == LEAF)

    def depth(self) -> int:
        used = np.flatnonzero(self.var != EMPTY)
        return int(K.node_depth(int(used.max())))

    def leaf_index(self, x) -> np.ndarray:
        """Heap index of the leaf reached by each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        active = self.var[node] >= 0
        while active.any():
            nd = node[active]
            right = x[rows[active], self.var[nd]] >= self.split[nd]
            node[active] = 2 * nd + 1 + right
            active = self.var[node] >= 0
        return node

    def padded(self, n_nodes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.cut is None:
            raise ValueError("tree has no cut indices; build it against a CutpointGrid")
        if self.var.shape[0] > n_nodes:
            raise ValueError("tree deeper than max_depth")
        var = np.full(n_nodes, EMPTY, dtype=np.int64)
        cut = np.zeros(n_nodes, dtype=np.int64)
        val = np.zeros(n_nodes)
        k = self.var.shape[0]
        var[:k] = self.var
        cut[:k] = np.where(self.var >= 0, self.cut, 0)
        val[:k] = self.value
        return var, cut, val

    @classmethod
    def from_arrays(cls, var, cut, val, grid: CutpointGrid) -> "DecisionTree":
        used = np.flatnonzero(var != EMPTY)
        size = int(used.max()) + 1
        var = np.array(var[:size])
        cut = np.where(var >= 0, cut[:size], -1)
        split = np.full(size, np.nan)
        for i in np.flatnonzero(var >= 0):
            split[i] = grid.cuts[var[i]][cut[i]]
        value = np.where(var == LEAF, val[:size], 0.0)
        return cls(var, split, value, cut)

    def copy(self) -> "DecisionTree":
        return DecisionTree(self.var.copy(), self.split.copy(), self.value.copy(),
                            None if self.cut is None else self.cut.copy())

    def __eq__(self, other):
        if not isinstance(other, DecisionTree):
            return NotImplemented
        return (np.array_equal(self.var, other.var)
                and np.array_equal(self.split, other.split, equal_nan=True)
                and np.array_equal(self.value, other.value))

    def __repr__(self):
        return f"DecisionTree(leaves={self.n_leaves}, depth={self.depth()})"


def evaluate(tree: DecisionTree, x) -> float | np.ndarray:
    """Leaf value reached by a row (scalar) or by each row of a matrix."""
    x = np.asarray(x, dtype=float)
    out = tree.value[tree.leaf_index(x)]
    return float(out[0]) if x.ndim == 1 else out


def sum_evaluate(forest: Sequence[DecisionTree], x) -> float | np.ndarray:
    x = np.asarray(x, dtype=float)
    total = np.zeros(1 if x.ndim == 1 else x.shape[0])
    for tree in forest:
        total += tree.value[tree.leaf_index(x)]
    return float(total[0]) if x.ndim == 1 else total


def sample_tree_from_prior(prior: TreePrior, grid: CutpointGrid,
                           rng: np.random.Generator) -> DecisionTree:
    """Draw a tree shape, uniform split rules and N(0, leaf_sd^2) leaf values."""
    ncuts = grid.counts
    if not np.any(ncuts > 0):
        raise ValueError("cutpoint grid has no candidate splits")
    var = np.empty(prior.n_nodes, dtype=np.int64)
    cut = np.zeros(prior.n_nodes, dtype=np.int64)
    lo = np.empty(grid.p, dtype=np.int64)
    hi = np.empty(grid.p, dtype=np.int64)
    K.sample_prior_shape(var, cut, ncuts, prior.base, prior.power, prior.max_depth, rng, lo, hi)
    val = np.where(var == LEAF, prior.leaf_sd * rng.standard_normal(var.shape[0]), 0.0)
    return DecisionTree.from_arrays(var, cut, val, grid)


def prior_leaf_counts(prior: TreePrior, grid: CutpointGrid, n_draws: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Leaf counts of ``n_draws`` independent prior trees."""
    return K.prior_leaf_counts(n_draws, grid.counts, prior.base, prior.power,
                               prior.max_depth, rng)


def tree_log_prior(tree: DecisionTree, prior: TreePrior, grid: CutpointGrid) -> float:
    var, cut, _ = tree.padded(prior.n_nodes)
    lo = np.empty(grid.p, dtype=np.int64)
    hi = np.empty(grid.p, dtype=np.int64)
    return float(K.tree_log_prior(var, cut, var.shape[0], grid.counts, prior.base,
                                  prior.power, prior.max_depth, lo, hi))


@dataclass(frozen=True)
class LeafStats:
    n: int
    s: float  # residual sum
    q: float  # residual sum of squares


class SufficientStats(dict):
    """Mapping of leaf heap index to :class:`LeafStats`."""

    @classmethod
    def compute(cls, tree: DecisionTree, x, residuals) -> "SufficientStats":
        leaf = tree.leaf_index(x)
        r = np.asarray(residuals, dtype=float)
        out = cls()
        for b in tree.leaves:
            rb = r[leaf == b]
            out[int(b)] = LeafStats(int(rb.shape[0]), float(rb.sum()), float(rb @ rb))
        return out


def leaf_log_marginal(stats: LeafStats, sigma2: float, leaf_sd: float) -> float:
    """Log of the leaf likelihood with the N(0, leaf_sd^2) leaf value integrated out."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    n, s, q = stats.n, stats.s, stats.q
    t2 = leaf_sd * leaf_sd
    denom = sigma2 + n * t2
    return (-0.5 * n * math.log(2.0 * math.pi * sigma2) + 0.5 * math.log(sigma2 / denom)
            - q / (2.0 * sigma2) + t2 * s * s / (2.0 * sigma2 * denom))


def leaf_posterior(stats: LeafStats, sigma2: float, leaf_sd: float) -> tuple[float, float]:
    """Mean and variance of a leaf value given its residuals."""
    t2 = leaf_sd * leaf_sd
    denom = sigma2 + stats.n * t2
    return t2 * stats.s / denom, sigma2 * t2 / denom


@dataclass(frozen=True)
class MoveProbabilities:
    grow: float = 0.25
    prune: float = 0.25
    change: float = 0.5

    def __post_init__(self):
        if min(self.grow, self.prune, self.change) < 0 or self.grow <= 0:
            raise ValueError("move probabilities must be nonnegative with grow > 0")


def mh_step(tree: DecisionTree, x, residuals, sigma2: float, prior: TreePrior,
            grid: CutpointGrid, rng: np.random.Generator,
            moves: MoveProbabilities = MoveProbabilities()) -> DecisionTree:
    """One grow/prune/change Metropolis-Hastings update with leaf values integrated out.

    Leaf values of the returned tree are stale; follow with :func:`draw_leaf_values`.
    """
    r = np.asarray(residuals, dtype=float)
    bins = grid.bin(x)
    var, cut, val = tree.padded(prior.n_nodes)
    top = int(np.flatnonzero(var != EMPTY).max()) + 1
    leaf_of = K.route(var, cut, bins, np.arange(bins.shape[0]), 0)
    w = np.full(r.shape[0], 1.0 / sigma2)
    lo = np.empty(grid.p, dtype=np.int64)
    hi = np.empty(grid.p, dtype=np.int64)
    tally = np.zeros((3, 2), dtype=np.int64)
    K.mh_update(var, cut, leaf_of, top, bins, grid.counts, r, w, 1.0 / prior.leaf_sd ** 2,
                prior.base, prior.power, prior.max_depth, moves.grow, moves.prune,
                moves.change, rng, lo, hi, K.depth_table(prior.n_nodes), tally)
    return DecisionTree.from_arrays(var, cut, val, grid)


def _move(old: DecisionTree, new: DecisionTree):
    """Classify ``old -> new`` as ("grow" | "prune" | "change", node)."""
    size = max(old.var.shape[0], new.var.shape[0])
    a = np.full(size, EMPTY, dtype=np.int64)
    b = np.full(size, EMPTY, dtype=np.int64)
    a[:old.var.shape[0]] = old.var
    b[:new.var.shape[0]] = new.var
    ca = np.zeros(size, dtype=np.int64)
    cb = np.zeros(size, dtype=np.int64)
    ca[:old.var.shape[0]] = np.where(old.var >= 0, old.cut, 0)
    cb[:new.var.shape[0]] = np.where(new.var >= 0, new.cut, 0)
    diff = np.flatnonzero((a != b) | ((a >= 0) & (ca != cb)))
    if diff.size == 0:
        raise ValueError("trees are identical")
    k = int(diff[0])
    if a[k] == LEAF and b[k] >= 0 and set(diff.tolist()) == {k, 2 * k + 1, 2 * k + 2}:
        return "grow", k
    if a[k] >= 0 and b[k] == LEAF and set(diff.tolist()) == {k, 2 * k + 1, 2 * k + 2}:
        return "prune", k
    if diff.size == 1 and a[k] >= 0 and b[k] >= 0:
        return "change", k
    raise ValueError("trees are not one grow, prune or change move apart")


def _log_q(old: DecisionTree, new: DecisionTree, prior: TreePrior, grid: CutpointGrid,
           moves: MoveProbabilities) -> float:
    """Log probability that one proposal from ``old`` produces ``new``."""
    kind, k = _move(old, new)
    var, cut, _ = old.padded(prior.n_nodes)
    top = int(np.flatnonzero(var != EMPTY).max()) + 1
    lo = np.empty(grid.p, dtype=np.int64)
    hi = np.empty(grid.p, dtype=np.int64)
    ncuts = grid.counts
    n_grow, n_nog, n_int = K.move_counts(var, cut, top, ncuts, prior.max_depth, lo, hi)
    pg, pp, pc = K.move_probs(n_grow, n_nog, n_int, moves.grow, moves.prune, moves.change)
    if kind == "prune":
        return math.log(pp) - math.log(n_nog)
    n_avail = K.node_region(var, cut, k, ncuts, lo, hi)
    v = int(new.var[k])
    width = hi[v] - lo[v] + 1
    if kind == "grow":
        return math.log(pg) - math.log(n_grow) - math.log(n_avail) - math.log(width)
    return math.log(pc) - math.log(n_int) - math.log(n_avail) - math.log(width)


def _log_lik(tree: DecisionTree, x, residuals, sigma2, leaf_sd) -> float:
    stats = SufficientStats.compute(tree, x, residuals)
    if any(st.n == 0 for st in stats.values()):
        return -math.inf
    return sum(leaf_log_marginal(st, sigma2, leaf_sd) for st in stats.values())


def log_acceptance(old: DecisionTree, new: DecisionTree, x, residuals, sigma2: float,
                   prior: TreePrior, grid: CutpointGrid,
                   moves: MoveProbabilities = MoveProbabilities()) -> float:
    """Log Metropolis-Hastings ratio for proposing ``new`` from ``old``.

    Both trees need cut indices. ``-inf`` when ``new`` has an empty leaf.
    """
    ll_new = _log_lik(new, x, residuals, sigma2, prior.leaf_sd)
    if ll_new == -math.inf:
        return -math.inf
    return (tree_log_prior(new, prior, grid) - tree_log_prior(old, prior, grid)
            + ll_new - _log_lik(old, x, residuals, sigma2, prior.leaf_sd)
            + _log_q(new, old, prior, grid, moves) - _log_q(old, new, prior, grid, moves))


def proposal_log_prob(old: DecisionTree, new: DecisionTree, prior: TreePrior,
                      grid: CutpointGrid, moves: MoveProbabilities = MoveProbabilities()) -> float:
    return _log_q(old, new, prior, grid, moves)


def draw_leaf_values(tree: DecisionTree, stats: SufficientStats, sigma2: float,
                     leaf_sd: float, rng: np.random.Generator) -> DecisionTree:
    """Replace every leaf value by a draw from its conjugate normal posterior."""
    out = tree.copy()
    for b in tree.leaves:
        st = stats[int(b)]
        if st.n == 0:
            raise ValueError(f"leaf {b} has no observations")
        mean, var = leaf_posterior(st, sigma2, leaf_sd)
        out.value[b] = mean + math.sqrt(var) * rng.standard_normal()
    return out
