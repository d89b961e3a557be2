"""Blocked Gibbs engine shared by the single, two-component and treatment samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .data import BINARY, CutpointGrid

MOVE_NAMES = ("grow", "prune", "change")


@dataclass
class TreeArchive:
    """Per-draw forests of one block, flattened into node records."""

    columns: np.ndarray
    cuts: tuple
    m: int
    draw_ptr: np.ndarray  # records of draw s are [draw_ptr[s], draw_ptr[s+1])
    tree: np.ndarray
    node: np.ndarray
    var: np.ndarray
    cut: np.ndarray
    value: np.ndarray  # leaf values on the internal (modelling) scale

    def forest(self, s: int, n_nodes: int):
        a, b = self.draw_ptr[s], self.draw_ptr[s + 1]
        var = np.full((self.m, n_nodes), K.EMPTY, dtype=np.int64)
        cut = np.zeros((self.m, n_nodes), dtype=np.int64)
        val = np.zeros((self.m, n_nodes))
        t, nd = self.tree[a:b], self.node[a:b]
        var[t, nd] = self.var[a:b]
        cut[t, nd] = self.cut[a:b]
        val[t, nd] = self.value[a:b]
        return var, cut, val


@dataclass
class Block:
    """One sum-of-trees component restricted to a subset of covariate columns."""

    name: str
    columns: np.ndarray
    grid: CutpointGrid
    bins: np.ndarray
    m: int
    leaf_sd: float
    max_depth: int
    test_bins: Optional[np.ndarray] = None
    var: np.ndarray = field(init=False)
    cut: np.ndarray = field(init=False)
    val: np.ndarray = field(init=False)
    leaf_of: np.ndarray = field(init=False)
    top: np.ndarray = field(init=False)
    fit: np.ndarray = field(init=False)
    tally: np.ndarray = field(init=False)

    def __post_init__(self):
        n_nodes = 2 ** (self.max_depth + 1) - 1
        n = self.bins.shape[0]
        self.var = np.full((self.m, n_nodes), K.EMPTY, dtype=np.int64)
        self.var[:, 0] = K.LEAF
        self.cut = np.zeros((self.m, n_nodes), dtype=np.int64)
        self.val = np.zeros((self.m, n_nodes))
        self.leaf_of = np.zeros((self.m, n), dtype=np.int64)
        self.top = np.ones(self.m, dtype=np.int64)
        self.fit = np.zeros(n)
        self.tally = np.zeros((3, 2), dtype=np.int64)

    @property
    def leaf_prec(self) -> float:
        return 1.0 / (self.leaf_sd * self.leaf_sd)

    def test_fit(self) -> np.ndarray:
        return K.forest_predict(self.var, self.cut, self.val, self.test_bins)


def make_block(name, x, columns, m, leaf_sd, max_depth, max_cuts, x_test=None,
               grid: CutpointGrid | None = None) -> Block:
    from .data import build_cutpoints
    columns = np.asarray(columns, dtype=np.int64)
    sub = np.ascontiguousarray(x[:, columns])
    grid = build_cutpoints(sub, max_cuts) if grid is None else grid
    test_bins = None
    if x_test is not None:
        test_bins = np.ascontiguousarray(grid.bin(np.asarray(x_test, dtype=float)[:, columns]))
    return Block(name, columns, grid, np.ascontiguousarray(grid.bin(sub)), m, leaf_sd,
                 max_depth, test_bins)


@dataclass
class Treatment:
    a: np.ndarray
    mu0: float
    var0: float  # math.inf for a flat prior
    a_test: Optional[np.ndarray] = None


def beta_posterior(resid, a, w, mu0, var0):
    """Normal posterior of beta in ``resid = beta * a + e`` with ``e_i ~ N(0, 1/w_i)``."""
    if var0 == 0.0:
        return float(mu0), 0.0
    prior_prec = 0.0 if math.isinf(var0) else 1.0 / var0
    prec = float(np.sum(w * a * a)) + prior_prec
    if prec <= 0.0:
        raise ValueError("treatment column is identically zero under a flat prior")
    num = float(np.sum(w * a * resid)) + mu0 * prior_prec
    return num / prec, 1.0 / prec


@dataclass
class ChainOutput:
    fit: np.ndarray
    components: dict
    loglik: np.ndarray
    sigma2: Optional[np.ndarray]
    beta: Optional[np.ndarray]
    test_fit: Optional[np.ndarray]
    trees: Optional[dict]
    acceptance: dict


def run_chain(y, kind: str, blocks: list[Block], *, burn_in: int, draws: int, thin: int,
              rng: np.random.Generator, move_probs=(0.25, 0.25, 0.5), base=0.95, power=2.0,
              nu: float = 3.0, lam: float = 1.0, shift: float = 0.0, scale: float = 1.0,
              treatment: Treatment | None = None, keep_trees: bool = False,
              monitor: Callable[[dict], None] | None = None) -> ChainOutput:
    """Run the blocked Gibbs sampler.

    Continuous responses are modelled on ``(y - shift) / scale``; stored fits,
    variances and treatment effects are mapped back to the original scale.
    Binary responses use the logistic scale-mixture augmentation, unscaled.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    binary = kind == BINARY
    n_test = None
    for b in blocks:
        if b.test_bins is not None:
            n_test = b.test_bins.shape[0]
    p_grow, p_prune, p_change = move_probs
    depth_tab = K.depth_table(blocks[0].var.shape[1])

    if binary:
        target = np.where(y > 0.5, 0.5, -0.5)
        lam_i = np.ones(n)
        w = np.ones(n)
        sigma2 = 1.0
    else:
        target = (y - shift) / scale
        sigma2 = max(float(np.var(target)), lam) if n > 1 else lam
        w = np.full(n, 1.0 / sigma2)
    beta = 0.0
    a = None
    if treatment is not None:
        a = np.asarray(treatment.a, dtype=float)
        mu0, var0 = treatment.mu0, treatment.var0
        if not binary:
            mu0, var0 = mu0 / scale, var0 / (scale * scale)
        beta = 0.0 if var0 == 0.0 else mu0

    n_iter = burn_in + draws * thin
    fit_out = np.empty((draws, n))
    comp_out = {b.name: np.empty((draws, n)) for b in blocks}
    loglik = np.empty((draws, n))
    sig_out = None if binary else np.empty(draws)
    beta_out = None if treatment is None else np.empty(draws)
    test_out = None if n_test is None else np.empty((draws, n_test))
    trees = {b.name: [] for b in blocks} if keep_trees else None
    fsum = np.zeros(n)

    for it in range(n_iter):
        offset = beta * a if a is not None else 0.0
        if binary:
            K.draw_latents(target, y, fsum + offset, lam_i, rng)
        for b in blocks:
            others = fsum - b.fit
            partial = target - others - offset
            K.sweep(b.var, b.cut, b.val, b.leaf_of, b.top, b.fit, b.bins, b.grid.counts,
                    partial, w, b.leaf_prec, base, power, b.max_depth,
                    p_grow, p_prune, p_change, rng, depth_tab, b.tally)
            fsum = others + b.fit
        fsum = np.zeros(n)
        for b in blocks:
            fsum = fsum + b.fit
        if a is not None:
            mean, var = beta_posterior(target - fsum, a, w, mu0, var0)
            beta = mean + math.sqrt(var) * rng.standard_normal()
            offset = beta * a
        resid = target - fsum - offset
        if binary:
            K.draw_lambdas(lam_i, resid, rng)
            w = 1.0 / lam_i
        else:
            sigma2 = (nu * lam + float(resid @ resid)) / rng.chisquare(nu + n)
            w = np.full(n, 1.0 / sigma2)
        if monitor is not None:
            monitor({"iteration": it, "target": target, "resid": resid, "beta": beta,
                     "sigma2": sigma2, "lam": None if not binary else lam_i.copy(),
                     "blocks": blocks, "offset": offset, "fsum": fsum})

        if it < burn_in or (it - burn_in) % thin != thin - 1:
            continue
        s = (it - burn_in) // thin
        total = np.zeros(n)
        for b in blocks:
            comp = b.fit if binary else scale * b.fit
            if not binary and b is blocks[0]:
                comp = comp + shift
            comp_out[b.name][s] = comp
            total += comp
        beta_o = beta if binary else beta * scale
        if a is not None:
            beta_out[s] = beta_o
            total += beta_o * a
        fit_out[s] = total
        if binary:
            # log F(f) and log(1 - F(f)) without overflow
            loglik[s] = -np.logaddexp(0.0, np.where(y > 0.5, -total, total))
        else:
            s2 = sigma2 * scale * scale
            sig_out[s] = s2
            e = y - total
            loglik[s] = -0.5 * math.log(2.0 * math.pi * s2) - e * e / (2.0 * s2)
        if test_out is not None:
            tt = np.zeros(n_test)
            for b in blocks:
                comp = b.test_fit() if binary else scale * b.test_fit()
                if not binary and b is blocks[0]:
                    comp = comp + shift
                tt += comp
            if a is not None:
                tt += beta_o * np.asarray(treatment.a_test, dtype=float)
            test_out[s] = tt
        if trees is not None:
            for b in blocks:
                trees[b.name].append(K.export_nodes(b.var, b.cut, b.val, b.top))

    acceptance = {}
    for b in blocks:
        for i, mv in enumerate(MOVE_NAMES):
            prop, acc = b.tally[i]
            acceptance[f"{b.name}.{mv}"] = float(acc / prop) if prop else 0.0
    archives = None
    if trees is not None:
        archives = {}
        for b in blocks:
            recs = trees[b.name]
            ptr = np.zeros(draws + 1, dtype=np.int64)
            ptr[1:] = np.cumsum([r[0].shape[0] for r in recs])
            cat = [np.concatenate([r[i] for r in recs]) for i in range(5)]
            archives[b.name] = TreeArchive(b.columns, b.grid.cuts, b.m, ptr, cat[0], cat[1],
                                           cat[2], cat[3], cat[4])
    return ChainOutput(fit_out, comp_out, loglik, sig_out, beta_out, test_out, archives,
                       acceptance)


def archive_predict(archives: dict, order: list[str], x_new, shift: float, scale: float,
                    binary: bool, max_depth: int, beta=None, a_new=None) -> np.ndarray:
    """Per-draw predictions from stored trees, combined exactly as the chain combines fits."""
    x_new = np.asarray(x_new, dtype=float)
    n_nodes = 2 ** (max_depth + 1) - 1
    first = archives[order[0]]
    S = first.draw_ptr.shape[0] - 1
    out = np.empty((S, x_new.shape[0]))
    bins = {}
    for name in order:
        arc = archives[name]
        grid = CutpointGrid(arc.cuts)
        bins[name] = np.ascontiguousarray(grid.bin(x_new[:, arc.columns]))
    for s in range(S):
        total = np.zeros(x_new.shape[0])
        for name in order:
            arc = archives[name]
            var, cut, val = arc.forest(s, n_nodes)
            comp = K.forest_predict(var, cut, val, bins[name])
            if not binary:
                comp = scale * comp
            if not binary and name == order[0]:
                comp = comp + shift
            total += comp
        if beta is not None:
            total += beta[s] * a_new
        out[s] = total
    return out
