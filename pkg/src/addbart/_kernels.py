"""Inner loops of the tree samplers.

Trees live in heap layout: node ``i`` has children ``2i+1`` (left, ``x < cut``)
and ``2i+2``. ``var[i]`` is the split column, ``LEAF`` or ``EMPTY``; ``cut[i]``
is an index into that column's cutpoint grid. Observations are pre-binned so a
split test is an integer compare (``bins[i, v] <= cut`` goes left).

Leaf sufficient statistics are precision weighted: ``W = sum w_i`` and
``S = sum w_i r_i`` with ``w_i = 1/sigma^2`` for Gaussian errors or ``1/lambda_i``
for the logistic scale mixture.
"""

import math

import numpy as np

from ._accel import jit

LEAF = -1
EMPTY = -2

GROW = 0
PRUNE = 1
CHANGE = 2

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# tree geometry and prior


@jit
def node_depth(node):
    d = 0
    k = node + 1
    while k > 1:
        k >>= 1
        d += 1
    return d


@jit
def depth_table(n_nodes):
    out = np.empty(n_nodes, dtype=np.int64)
    for i in range(n_nodes):
        out[i] = node_depth(i)
    return out


@jit
def node_region(var, cut, node, ncuts, lo, hi):
    """Fill inclusive cut-index bounds available at ``node``; return the number of usable columns."""
    p = ncuts.shape[0]
    for v in range(p):
        lo[v] = 0
        hi[v] = ncuts[v] - 1
    child = node
    while child > 0:
        parent = (child - 1) // 2
        v = var[parent]
        c = cut[parent]
        if child == 2 * parent + 1:
            if c - 1 < hi[v]:
                hi[v] = c - 1
        elif c + 1 > lo[v]:
            lo[v] = c + 1
        child = parent
    n_avail = 0
    for v in range(p):
        if hi[v] >= lo[v]:
            n_avail += 1
    return n_avail


@jit
def nth_available(lo, hi, k):
    for v in range(lo.shape[0]):
        if hi[v] >= lo[v]:
            if k == 0:
                return v
            k -= 1
    return -1


@jit
def split_prob(depth, n_avail, base, power, max_depth):
    if n_avail == 0 or depth >= max_depth:
        return 0.0
    return base * (1.0 + depth) ** (-power)


@jit
def tree_log_prior(var, cut, top, ncuts, base, power, max_depth, lo, hi):
    """Log prior mass of the tree shape and split rules (``-inf`` if a rule is unrealizable)."""
    lp = 0.0
    for node in range(top):
        v = var[node]
        if v == EMPTY:
            continue
        n_avail = node_region(var, cut, node, ncuts, lo, hi)
        ps = split_prob(node_depth(node), n_avail, base, power, max_depth)
        if v == LEAF:
            lp += math.log1p(-ps)
        else:
            c = cut[node]
            if ps == 0.0 or c < lo[v] or c > hi[v]:
                return -np.inf
            lp += math.log(ps) - math.log(n_avail) - math.log(hi[v] - lo[v] + 1)
    return lp


@jit
def growable(var, cut, node, ncuts, max_depth, lo, hi):
    if var[node] != LEAF or node_depth(node) >= max_depth:
        return False
    return node_region(var, cut, node, ncuts, lo, hi) > 0


@jit
def move_counts(var, cut, top, ncuts, max_depth, lo, hi):
    n_grow = 0
    n_nog = 0
    n_int = 0
    for node in range(top):
        v = var[node]
        if v == LEAF:
            if growable(var, cut, node, ncuts, max_depth, lo, hi):
                n_grow += 1
        elif v >= 0:
            n_int += 1
            if var[2 * node + 1] == LEAF and var[2 * node + 2] == LEAF:
                n_nog += 1
    return n_grow, n_nog, n_int


@jit
def move_probs(n_grow, n_nog, n_int, p_grow, p_prune, p_change):
    g = p_grow if n_grow > 0 else 0.0
    p = p_prune if n_nog > 0 else 0.0
    c = p_change if n_int > 0 else 0.0
    tot = g + p + c
    if tot == 0.0:
        return 0.0, 0.0, 0.0
    return g / tot, p / tot, c / tot


@jit
def nth_growable(var, cut, top, ncuts, max_depth, lo, hi, k):
    for node in range(top):
        if growable(var, cut, node, ncuts, max_depth, lo, hi):
            if k == 0:
                return node
            k -= 1
    return -1


@jit
def nth_nog(var, top, k):
    for node in range(top):
        if var[node] >= 0 and var[2 * node + 1] == LEAF and var[2 * node + 2] == LEAF:
            if k == 0:
                return node
            k -= 1
    return -1


@jit
def nth_interior(var, top, k):
    for node in range(top):
        if var[node] >= 0:
            if k == 0:
                return node
            k -= 1
    return -1


@jit
def shrink_top(var, top):
    while top > 1 and var[top - 1] == EMPTY:
        top -= 1
    return top


@jit
def count_leaves(var, top):
    b = 0
    for node in range(top):
        if var[node] == LEAF:
            b += 1
    return b


@jit
def sample_prior_shape(var, cut, ncuts, base, power, max_depth, rng, lo, hi):
    """Grow a tree by the depth-dependent splitting process; returns ``top``."""
    var[:] = EMPTY
    var[0] = LEAF
    top = 1
    node = 0
    while node < top:
        if var[node] == LEAF:
            n_avail = node_region(var, cut, node, ncuts, lo, hi)
            ps = split_prob(node_depth(node), n_avail, base, power, max_depth)
            if rng.random() < ps:
                v = nth_available(lo, hi, rng.integers(0, n_avail))
                var[node] = v
                cut[node] = lo[v] + rng.integers(0, hi[v] - lo[v] + 1)
                var[2 * node + 1] = LEAF
                var[2 * node + 2] = LEAF
                if 2 * node + 3 > top:
                    top = 2 * node + 3
        node += 1
    return top


@jit
def prior_leaf_counts(n_draws, ncuts, base, power, max_depth, rng):
    n_nodes = 2 ** (max_depth + 1) - 1
    var = np.empty(n_nodes, dtype=np.int64)
    cut = np.zeros(n_nodes, dtype=np.int64)
    lo = np.empty(ncuts.shape[0], dtype=np.int64)
    hi = np.empty(ncuts.shape[0], dtype=np.int64)
    out = np.empty(n_draws, dtype=np.int64)
    for s in range(n_draws):
        top = sample_prior_shape(var, cut, ncuts, base, power, max_depth, rng, lo, hi)
        out[s] = count_leaves(var, top)
    return out


# ---------------------------------------------------------------------------
# likelihood pieces


@jit
def leaf_log_marginal_reduced(W, S, leaf_prec):
    """Leaf marginal likelihood up to terms that cancel across a Metropolis-Hastings ratio."""
    P = leaf_prec + W
    return 0.5 * math.log(leaf_prec / P) + 0.5 * S * S / P


@jit
def route(var, cut, bins, idx, start):
    """Leaf reached from ``start`` by each row ``idx`` of ``bins``."""
    p = bins.shape[1]
    flat = bins.ravel()
    node = np.full(idx.shape[0], start, dtype=np.int64)
    active = np.nonzero(var[node] >= 0)[0]
    while active.shape[0] > 0:
        nd = node[active]
        xb = flat[idx[active] * p + var[nd]]
        node[active] = 2 * nd + 1 + (xb > cut[nd]).astype(np.int64)
        active = active[var[node[active]] >= 0]
    return node


@jit
def in_subtree(leaf_of, node, depth_tab):
    dk = depth_tab[node]
    dl = depth_tab[leaf_of]
    shift = np.maximum(dl - dk, 0)
    anc = np.right_shift(leaf_of + 1, shift) - 1
    return (dl >= dk) & (anc == node)


@jit
def mh_update(var, cut, leaf_of, top, bins, ncuts, r, w, leaf_prec,
              base, power, max_depth, p_grow, p_prune, p_change, rng, lo, hi, depth_tab, tally):
    """One grow/prune/change proposal for a single tree; returns the new ``top``.

    ``tally[move, 0]`` counts proposals, ``tally[move, 1]`` acceptances.
    """
    n_grow, n_nog, n_int = move_counts(var, cut, top, ncuts, max_depth, lo, hi)
    pg, pp, pc = move_probs(n_grow, n_nog, n_int, p_grow, p_prune, p_change)
    if pg + pp + pc == 0.0:
        return top
    lp_old = tree_log_prior(var, cut, top, ncuts, base, power, max_depth, lo, hi)
    u = rng.random()

    if u < pg:
        tally[GROW, 0] += 1
        k = nth_growable(var, cut, top, ncuts, max_depth, lo, hi, rng.integers(0, n_grow))
        n_avail = node_region(var, cut, k, ncuts, lo, hi)
        v = nth_available(lo, hi, rng.integers(0, n_avail))
        width = hi[v] - lo[v] + 1
        c = lo[v] + rng.integers(0, width)
        log_q_fwd = math.log(pg) - math.log(n_grow) - math.log(n_avail) - math.log(width)
        idx = np.nonzero(leaf_of == k)[0]
        left = bins[idx, v] <= c
        wi = w[idx]
        swi = wi * r[idx]
        wl = wi[left]
        n_left = wl.shape[0]
        u_acc = rng.random()
        if n_left == 0 or n_left == idx.shape[0]:
            return top
        WL = wl.sum()
        SL = swi[left].sum()
        WR = wi[~left].sum()
        SR = swi[~left].sum()
        L = 2 * k + 1
        R = L + 1
        var[k] = v
        cut[k] = c
        var[L] = LEAF
        var[R] = LEAF
        new_top = max(top, R + 1)
        lp_new = tree_log_prior(var, cut, new_top, ncuts, base, power, max_depth, lo, hi)
        g2, n2, i2 = move_counts(var, cut, new_top, ncuts, max_depth, lo, hi)
        pg2, pp2, pc2 = move_probs(g2, n2, i2, p_grow, p_prune, p_change)
        log_q_rev = math.log(pp2) - math.log(n2)
        log_alpha = (lp_new - lp_old + log_q_rev - log_q_fwd
                     + leaf_log_marginal_reduced(WL, SL, leaf_prec)
                     + leaf_log_marginal_reduced(WR, SR, leaf_prec)
                     - leaf_log_marginal_reduced(WL + WR, SL + SR, leaf_prec))
        if u_acc < math.exp(min(0.0, log_alpha)):
            tally[GROW, 1] += 1
            leaf_of[idx[left]] = L
            leaf_of[idx[~left]] = R
            return new_top
        var[k] = LEAF
        var[L] = EMPTY
        var[R] = EMPTY
        return top

    if u < pg + pp:
        tally[PRUNE, 0] += 1
        k = nth_nog(var, top, rng.integers(0, n_nog))
        L = 2 * k + 1
        R = L + 1
        idx = np.nonzero((leaf_of == L) | (leaf_of == R))[0]
        left = leaf_of[idx] == L
        wi = w[idx]
        swi = wi * r[idx]
        WL = wi[left].sum()
        SL = swi[left].sum()
        WR = wi[~left].sum()
        SR = swi[~left].sum()
        v = var[k]
        c = cut[k]
        n_avail = node_region(var, cut, k, ncuts, lo, hi)
        width = hi[v] - lo[v] + 1
        log_q_fwd = math.log(pp) - math.log(n_nog)
        u_acc = rng.random()
        var[k] = LEAF
        var[L] = EMPTY
        var[R] = EMPTY
        new_top = shrink_top(var, top)
        lp_new = tree_log_prior(var, cut, new_top, ncuts, base, power, max_depth, lo, hi)
        g2, n2, i2 = move_counts(var, cut, new_top, ncuts, max_depth, lo, hi)
        pg2, pp2, pc2 = move_probs(g2, n2, i2, p_grow, p_prune, p_change)
        log_q_rev = math.log(pg2) - math.log(g2) - math.log(n_avail) - math.log(width)
        log_alpha = (lp_new - lp_old + log_q_rev - log_q_fwd
                     + leaf_log_marginal_reduced(WL + WR, SL + SR, leaf_prec)
                     - leaf_log_marginal_reduced(WL, SL, leaf_prec)
                     - leaf_log_marginal_reduced(WR, SR, leaf_prec))
        if u_acc < math.exp(min(0.0, log_alpha)):
            tally[PRUNE, 1] += 1
            leaf_of[idx] = k
            return new_top
        var[k] = v
        cut[k] = c
        var[L] = LEAF
        var[R] = LEAF
        return top

    tally[CHANGE, 0] += 1
    k = nth_interior(var, top, rng.integers(0, n_int))
    n_avail = node_region(var, cut, k, ncuts, lo, hi)
    v_old = var[k]
    c_old = cut[k]
    width_old = hi[v_old] - lo[v_old] + 1
    v = nth_available(lo, hi, rng.integers(0, n_avail))
    width = hi[v] - lo[v] + 1
    c = lo[v] + rng.integers(0, width)
    u_acc = rng.random()
    var[k] = v
    cut[k] = c
    lp_new = tree_log_prior(var, cut, top, ncuts, base, power, max_depth, lo, hi)
    if lp_new == -np.inf:
        var[k] = v_old
        cut[k] = c_old
        return top
    # n_int is unchanged, but new rules can change which leaves are growable
    g2, n2, i2 = move_counts(var, cut, top, ncuts, max_depth, lo, hi)
    pg2, pp2, pc2 = move_probs(g2, n2, i2, p_grow, p_prune, p_change)
    log_q_ratio = math.log(pc2) - math.log(pc) + math.log(width) - math.log(width_old)
    idx = np.nonzero(in_subtree(leaf_of, k, depth_tab))[0]
    new_leaf = route(var, cut, bins, idx, k)
    old_leaf = leaf_of[idx]
    wi = w[idx]
    swi = wi * r[idx]
    n_old = np.bincount(old_leaf, minlength=top)
    n_new = np.bincount(new_leaf, minlength=top)
    if np.any((n_old > 0) & (n_new == 0)):
        var[k] = v_old
        cut[k] = c_old
        return top
    W_old = np.bincount(old_leaf, wi, top)
    S_old = np.bincount(old_leaf, swi, top)
    W_new = np.bincount(new_leaf, wi, top)
    S_new = np.bincount(new_leaf, swi, top)
    dlik = 0.0
    for node in range(top):
        if n_old[node] > 0:
            dlik += (leaf_log_marginal_reduced(W_new[node], S_new[node], leaf_prec)
                     - leaf_log_marginal_reduced(W_old[node], S_old[node], leaf_prec))
    log_alpha = lp_new - lp_old + log_q_ratio + dlik
    if u_acc < math.exp(min(0.0, log_alpha)):
        tally[CHANGE, 1] += 1
        leaf_of[idx] = new_leaf
        return top
    var[k] = v_old
    cut[k] = c_old
    return top


@jit
def draw_leaves(var, val, leaf_of, top, r, w, leaf_prec, rng):
    """Conjugate normal draw of every leaf value given the partial residuals."""
    W = np.bincount(leaf_of, w, top)
    S = np.bincount(leaf_of, w * r, top)
    for node in range(top):
        if var[node] == LEAF:
            P = leaf_prec + W[node]
            val[node] = S[node] / P + rng.standard_normal() / math.sqrt(P)


@jit
def forest_fit(val, leaf_of, out):
    out[:] = 0.0
    for j in range(val.shape[0]):
        out += val[j][leaf_of[j]]


@jit
def sweep(var, cut, val, leaf_of, top, fit, bins, ncuts, target, w, leaf_prec,
          base, power, max_depth, p_grow, p_prune, p_change, rng, depth_tab, tally):
    """Bayesian backfitting: update every tree against its partial residual.

    On return ``fit`` is recomputed from scratch as the tree-ordered sum of
    per-tree fits, so ``target - fit`` is exactly the post-sweep residual.
    """
    p = ncuts.shape[0]
    lo = np.empty(p, dtype=np.int64)
    hi = np.empty(p, dtype=np.int64)
    for j in range(var.shape[0]):
        old = val[j][leaf_of[j]]
        r = target - fit + old
        top[j] = mh_update(var[j], cut[j], leaf_of[j], top[j], bins, ncuts, r, w, leaf_prec,
                           base, power, max_depth, p_grow, p_prune, p_change, rng,
                           lo, hi, depth_tab, tally)
        draw_leaves(var[j], val[j], leaf_of[j], top[j], r, w, leaf_prec, rng)
        fit += val[j][leaf_of[j]] - old
    forest_fit(val, leaf_of, fit)


@jit
def forest_predict(var, cut, val, bins):
    n = bins.shape[0]
    out = np.zeros(n)
    idx = np.arange(n)
    for j in range(var.shape[0]):
        out += val[j][route(var[j], cut[j], bins, idx, 0)]
    return out


@jit
def export_nodes(var, cut, val, top):
    """Flatten the used nodes of a forest into parallel (tree, node, var, cut, value) arrays."""
    total = 0
    for j in range(var.shape[0]):
        for node in range(top[j]):
            if var[j, node] != EMPTY:
                total += 1
    tree = np.empty(total, dtype=np.int64)
    nid = np.empty(total, dtype=np.int64)
    v_out = np.empty(total, dtype=np.int64)
    c_out = np.empty(total, dtype=np.int64)
    val_out = np.empty(total)
    k = 0
    for j in range(var.shape[0]):
        for node in range(top[j]):
            if var[j, node] != EMPTY:
                tree[k] = j
                nid[k] = node
                v_out[k] = var[j, node]
                c_out[k] = cut[j, node]
                val_out[k] = val[j, node] if var[j, node] == LEAF else 0.0
                k += 1
    return tree, nid, v_out, c_out, val_out


@jit
def tree_chain(var, cut, top, bins, ncuts, r, w, leaf_prec, base, power, max_depth,
               p_grow, p_prune, p_change, n_iter, n_keep, rng):
    """Run ``mh_update`` repeatedly on one tree; record (var, cut) of the first ``n_keep`` nodes."""
    n = bins.shape[0]
    depth_tab = depth_table(var.shape[0])
    leaf_of = route(var, cut, bins, np.arange(n), 0)
    lo = np.empty(ncuts.shape[0], dtype=np.int64)
    hi = np.empty(ncuts.shape[0], dtype=np.int64)
    tally = np.zeros((3, 2), dtype=np.int64)
    states = np.empty((n_iter, 2 * n_keep), dtype=np.int64)
    for s in range(n_iter):
        top = mh_update(var, cut, leaf_of, top, bins, ncuts, r, w, leaf_prec, base, power,
                        max_depth, p_grow, p_prune, p_change, rng, lo, hi, depth_tab, tally)
        for node in range(n_keep):
            states[s, node] = var[node]
            states[s, n_keep + node] = cut[node] if var[node] >= 0 else -1
    return states, tally


# ---------------------------------------------------------------------------
# Gaussian helpers


@jit
def ndtr(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@jit
def ndtri(p):
    """Inverse standard normal CDF (rational start plus one Halley step)."""
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    a1, a2, a3 = -3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02
    a4, a5, a6 = 1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00
    b1, b2, b3 = -5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02
    b4, b5 = 6.680131188771972e+01, -1.328068155288572e+01
    c1, c2, c3 = -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00
    c4, c5, c6 = -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00
    d1, d2, d3, d4 = 7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00
    if p < 0.02425:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c1 * q + c2) * q + c3) * q + c4) * q + c5) * q + c6) / \
            ((((d1 * q + d2) * q + d3) * q + d4) * q + 1.0)
    elif p <= 1.0 - 0.02425:
        q = p - 0.5
        t = q * q
        x = (((((a1 * t + a2) * t + a3) * t + a4) * t + a5) * t + a6) * q / \
            (((((b1 * t + b2) * t + b3) * t + b4) * t + b5) * t + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((c1 * q + c2) * q + c3) * q + c4) * q + c5) * q + c6) / \
            ((((d1 * q + d2) * q + d3) * q + d4) * q + 1.0)
    e = ndtr(x) - p
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@jit
def truncnorm_positive(mean, sd, rng):
    """Draw from N(mean, sd^2) conditioned on being strictly positive."""
    a = -mean / sd
    while True:
        if a > 4.0:
            # exponential proposal on the standardized tail (x > a)
            rate = 0.5 * (a + math.sqrt(a * a + 4.0))
            while True:
                z = a + rng.exponential() / rate
                if rng.random() <= math.exp(-0.5 * (z - rate) ** 2):
                    break
        elif a >= 0.0:
            q = 0.5 * math.erfc(a / _SQRT2)
            z = -ndtri((1.0 - rng.random()) * q)
        else:
            lower = ndtr(a)
            z = ndtri(lower + rng.random() * (1.0 - lower))
        x = mean + sd * z
        if x > 0.0:
            return x


@jit
def draw_latents(z, y, mean, lam, rng):
    for i in range(z.shape[0]):
        sd = math.sqrt(lam[i])
        if y[i] > 0.5:
            z[i] = truncnorm_positive(mean[i], sd, rng)
        else:
            z[i] = -truncnorm_positive(-mean[i], sd, rng)


# ---------------------------------------------------------------------------
# logistic scale mixture: lambda = (2 phi)^2, phi Kolmogorov-Smirnov


@jit
def ks_accept_right(u, lam):
    """Alternating-series squeeze of the acceptance probability, valid for lam > 4/3."""
    z = 1.0
    x = math.exp(-0.5 * lam)
    j = 0
    while True:
        j += 1
        z -= (j + 1) ** 2 * x ** ((j + 1) ** 2 - 1)
        if z > u:
            return True
        j += 1
        z += (j + 1) ** 2 * x ** ((j + 1) ** 2 - 1)
        if z < u:
            return False


@jit
def ks_accept_left(u, lam):
    """Squeeze using the theta-transformed series, valid for lam <= 4/3."""
    if u <= 0.0:
        return True
    h = (0.5 * math.log(2.0) + 2.5 * math.log(math.pi) - 2.5 * math.log(lam)
         - math.pi ** 2 / (2.0 * lam) + 0.5 * lam)
    lu = math.log(u)
    z = 1.0
    x = math.exp(-math.pi ** 2 / (2.0 * lam))
    k = lam / math.pi ** 2
    j = 0
    while True:
        j += 1
        z -= k * x ** (j * j - 1)
        if h + math.log(z) > lu:
            return True
        j += 1
        z += (j + 1) ** 2 * x ** ((j + 1) ** 2 - 1)
        if h + math.log(z) < lu:
            return False


@jit
def lambda_draw(resid, rng):
    """Draw lambda | resid with density prop. to lambda^-1/2 exp(-resid^2 / 2 lambda) p(lambda).

    Proposal is GIG(1/2, 1, resid^2), sampled as ``|resid| / X`` with X inverse
    Gaussian(1, |resid|); the root is written in a form that stays finite as
    ``resid -> 0``.
    """
    r = abs(resid)
    while True:
        y = rng.standard_normal()
        y = y * y
        if y == 0.0:
            continue
        s = math.sqrt(y * y + 4.0 * r * y)
        lam1 = (y + s) ** 2 / (4.0 * y)
        x1 = r / lam1
        if rng.random() <= 1.0 / (1.0 + x1):
            lam = lam1
        else:
            lam = r * x1
        u = rng.random()
        if lam > 4.0 / 3.0:
            ok = ks_accept_right(u, lam)
        else:
            ok = ks_accept_left(u, lam)
        if ok and lam > 0.0:
            return lam


@jit
def draw_lambdas(lam, resid, rng):
    for i in range(lam.shape[0]):
        lam[i] = lambda_draw(resid[i], rng)


@jit
def lambda_draw_many(resid, rng):
    out = np.empty(resid.shape[0])
    draw_lambdas(out, resid, rng)
    return out


@jit
def truncnorm_many(mean, sd, n, rng):
    out = np.empty(n)
    for i in range(n):
        out[i] = truncnorm_positive(mean, sd, rng)
    return out
