"""Compiled inner loops for split search."""

import math

import numpy as np
from numba import njit
from scipy.special import gammaln

_LOG_2PI = math.log(2.0 * math.pi)

# rows of the table returned by count_tables
_CONST, _SHAPE, _INV_N, _SHRINK, _MU0_N = range(5)


def count_tables(M: int, size: int, prior) -> np.ndarray:
    """Per-row-count terms of the log marginal for a module with ``size`` members.

    Column ``k`` covers ``k`` rows, i.e. ``k * size`` pooled observations, and
    the log marginal becomes ``const - shape * log(beta_n)`` with
    ``beta_n = beta0 + scatter / 2 + shrink * (S - mu0_n) ** 2`` and
    ``scatter = Q - S**2 * inv_n``.
    """
    k = np.arange(M + 1, dtype=float)
    n = k * size
    safe = np.where(n > 0, n, 1.0)
    tab = np.empty((5, M + 1))
    tab[_SHAPE] = prior.alpha0 + 0.5 * n
    tab[_CONST] = (gammaln(tab[_SHAPE]) - math.lgamma(prior.alpha0)
                   + prior.alpha0 * math.log(prior.beta0)
                   + 0.5 * (math.log(prior.kappa0) - np.log(prior.kappa0 + n))
                   - 0.5 * n * _LOG_2PI)
    tab[_INV_N] = np.where(n > 0, 1.0 / safe, 0.0)
    tab[_SHRINK] = np.where(n > 0, prior.kappa0 / (2.0 * safe * (prior.kappa0 + n)), 0.0)
    tab[_MU0_N] = n * prior.mu0
    return tab


@njit(cache=True)
def _beta_n(k, S, Q, tab, beta0):
    scatter = Q - S * S * tab[2, k]
    if scatter < 0.0:
        scatter = 0.0
    shift = S - tab[4, k]
    return beta0 + 0.5 * scatter + tab[3, k] * shift * shift


@njit(cache=True)
def _lml(k, S, Q, tab, beta0):
    return tab[0, k] - tab[1, k] * math.log(_beta_n(k, S, Q, tab, beta0))


@njit(cache=True)
def best_split_per_var(order, sorted_vals, in_leaf, n_rows, row_sum, row_sumsq, var_ids,
                       min_rows, tab, beta0, out_gain, out_thr, out_rows):
    """Best ``value < u`` split of one leaf for each candidate variable.

    ``order[v]`` lists instances sorted by variable ``v`` and ``sorted_vals[v]``
    the matching values.  Thresholds are observed values; the first
    (smallest) threshold wins ties.  Variables without a legal split get
    ``out_rows = -1``; otherwise ``out_rows`` counts the rows sent true.
    """
    M = order.shape[1]
    S_tot = 0.0
    Q_tot = 0.0
    for m in range(M):
        if in_leaf[m]:
            S_tot += row_sum[m]
            Q_tot += row_sumsq[m]
    base = _lml(n_rows, S_tot, Q_tot, tab, beta0)
    for idx in range(var_ids.shape[0]):
        v = var_ids[idx]
        best = -np.inf
        best_thr = np.nan
        best_k = -1
        k = 0
        cs = 0.0
        cq = 0.0
        prev = -np.inf
        for j in range(M):
            row = order[v, j]
            if not in_leaf[row]:
                continue
            val = sorted_vals[v, j]
            if k >= min_rows and val > prev:
                if n_rows - k < min_rows:
                    break
                g = (_lml(k, cs, cq, tab, beta0)
                     + _lml(n_rows - k, S_tot - cs, Q_tot - cq, tab, beta0) - base)
                if g > best:
                    best = g
                    best_thr = val
                    best_k = k
            k += 1
            cs += row_sum[row]
            cq += row_sumsq[row]
            prev = val
        out_gain[idx] = best
        out_thr[idx] = best_thr
        out_rows[idx] = best_k


@njit(cache=True)
def _best_split(src, a, count, v, vals_t, row_sum, row_sumsq, S_tot, Q_tot, base, min_rows,
                tab, beta0, floor):
    """Best ``value < u`` split of the ``count`` rows ``src[a, :count]`` (sorted by ``v``).

    Returns ``(gain, threshold, rows_true)`` with ``rows_true = -1`` when no
    legal split exists.  Thresholds whose gain cannot exceed ``floor`` may
    be left unscored: the bound ``log(x) >= log(x0) + 1 - x0 / x`` around the
    last scored point, padded far beyond rounding error, proves they would
    not win.  The result is therefore exact whenever its gain exceeds
    ``floor``; the first (smallest) threshold wins ties.
    """
    best = -np.inf
    best_thr = np.nan
    best_k = -1
    kk = 0
    cs = 0.0
    cq = 0.0
    prev = -np.inf
    ref_left = 0.0
    log_left = 0.0
    ref_right = 0.0
    log_right = 0.0
    for j in range(count):
        row = src[a, j]
        val = vals_t[v, row]
        if kk >= min_rows and val > prev:
            kr = count - kk
            if kr < min_rows:
                break
            b_left = _beta_n(kk, cs, cq, tab, beta0)
            b_right = _beta_n(kr, S_tot - cs, Q_tot - cq, tab, beta0)
            bar = max(best, floor)
            skip = False
            if ref_left > 0.0 and bar > -np.inf:
                lo_left = log_left + 1.0 - ref_left / b_left
                lo_right = log_right + 1.0 - ref_right / b_right
                ceiling = (tab[0, kk] - tab[1, kk] * lo_left
                           + tab[0, kr] - tab[1, kr] * lo_right - base)
                slack = 1e-9 * (abs(tab[0, kk]) + abs(tab[0, kr]) + abs(base) + 1.0
                                + tab[1, kk] * (abs(lo_left) + 1.0)
                                + tab[1, kr] * (abs(lo_right) + 1.0))
                skip = ceiling + slack <= bar
            if not skip:
                ref_left = b_left
                log_left = math.log(b_left)
                ref_right = b_right
                log_right = math.log(b_right)
                g = ((tab[0, kk] - tab[1, kk] * log_left)
                     + (tab[0, kr] - tab[1, kr] * log_right) - base)
                if g > best:
                    best = g
                    best_thr = val
                    best_k = kk
        kk += 1
        cs += row_sum[row]
        cq += row_sumsq[row]
        prev = val
    return best, best_thr, best_k


@njit(cache=True)
def _partition(src, count, A, goes_true, dst_true, dst_false):
    """Stable split of every variable's sorted rows by ``goes_true``."""
    nt = 0
    for a in range(A):
        nt = 0
        nf = 0
        for j in range(count):
            row = src[a, j]
            if goes_true[row]:
                dst_true[a, nt] = row
                nt += 1
            else:
                dst_false[a, nf] = row
                nf += 1
    return nt


@njit(cache=True)
def greedy_lookahead(order, vals_t, leaf_mask, leaf_depth, max_depth, row_sum, row_sumsq,
                     var_ids, first_pos, min_rows, tab, beta0, lam, lookahead,
                     out_gain, out_thr, out_value, out_len, out_full, out_leaf, out_var,
                     out_path_thr):
    """Value first splits of one leaf by a greedy (beam width 1) lookahead.

    ``var_ids`` (ascending) are the variables any split may test and
    ``first_pos`` indexes the ones to try as the first split; output row
    ``f`` belongs to ``var_ids[first_pos[f]]``.  The first split uses that
    variable's best threshold; up to ``lookahead - 1`` further splits are
    then added greedily beneath it, each the best single split over the
    current leaves (earliest leaf, then lowest variable, wins ties).

    ``out_value[f]`` is the best cumulative gain over path prefixes and
    ``out_len[f]`` the shortest prefix reaching it; ``out_full[f]`` is the
    number of greedy steps taken.  Step ``s`` splits lookahead leaf
    ``out_leaf[f, s]``: the starting leaf is 0 and the split at step ``s``
    creates leaves ``2s + 1`` (true) and ``2s + 2`` (false).
    ``max_depth < 0`` means unlimited.
    """
    A = var_ids.shape[0]
    F = first_pos.shape[0]
    M = leaf_mask.shape[0]
    for f in range(F):
        out_gain[f] = -np.inf
        out_thr[f] = np.nan
        out_value[f] = -np.inf
        out_len[f] = 0
        out_full[f] = 0
    n = 0
    for m in range(M):
        if leaf_mask[m]:
            n += 1
    if n < 2 * min_rows or (max_depth >= 0 and leaf_depth >= max_depth):
        return
    n_labels = 2 * lookahead + 1
    # rows of each lookahead leaf, sorted by every variable; leaf 0 is the whole leaf
    sorted_rows = np.empty((max(n_labels - 2, 1), A, n), dtype=np.int64)
    for a in range(A):
        v = var_ids[a]
        r = 0
        for j in range(M):
            row = order[v, j]
            if leaf_mask[row]:
                sorted_rows[0, a, r] = row
                r += 1

    n_lab = np.zeros(n_labels, dtype=np.int64)
    S_lab = np.zeros(n_labels)
    Q_lab = np.zeros(n_labels)
    base = np.zeros(n_labels)
    depth = np.zeros(n_labels, dtype=np.int64)
    slot = np.zeros(n_labels, dtype=np.int64)
    lg = np.full(n_labels, -np.inf)
    lv = np.full(n_labels, -1, dtype=np.int64)
    lt = np.full(n_labels, np.nan)
    live = np.empty(n_labels, dtype=np.int64)
    goes_true = np.zeros(M, dtype=np.bool_)
    spare_t = np.empty((A, n), dtype=np.int64)
    spare_f = np.empty((A, n), dtype=np.int64)

    rows = np.empty(n, dtype=np.int64)
    r = 0
    for m in range(M):
        if leaf_mask[m]:
            rows[r] = m
            r += 1
    lab = np.zeros(M, dtype=np.int64)
    S0 = 0.0
    Q0 = 0.0
    for j in range(n):
        S0 += row_sum[rows[j]]
        Q0 += row_sumsq[rows[j]]
    n_lab[0] = n
    S_lab[0] = S0
    Q_lab[0] = Q0
    base[0] = _lml(n, S0, Q0, tab, beta0)
    depth[0] = leaf_depth

    for f in range(F):
        a = first_pos[f]
        v = var_ids[a]
        g0, t0, k0 = _best_split(sorted_rows[0], a, n, v, vals_t, row_sum, row_sumsq, S0, Q0,
                                 base[0], min_rows, tab, beta0, -np.inf)
        if k0 < 0:
            continue
        for j in range(n):
            lab[rows[j]] = 0
        g1 = g0 - lam
        out_gain[f] = g1
        out_thr[f] = t0
        out_leaf[f, 0] = 0
        out_var[f, 0] = v
        out_path_thr[f, 0] = t0
        total = g1
        value = g1
        best_len = 1
        steps = 1
        n_live = 0
        split_label = 0
        split_var = v
        split_thr = t0
        next_slot = 1
        for step in range(1, lookahead):
            # carry out the last chosen split, then search its two children
            t_id = 2 * step - 1
            f_id = t_id + 1
            src = sorted_rows[slot[split_label]]
            count = n_lab[split_label]
            # children need their own sorted rows only if they may be split again
            d = depth[split_label] + 1
            depth[t_id] = d
            depth[f_id] = d
            n_lab[t_id] = 0
            n_lab[f_id] = 0
            S_lab[t_id] = 0.0
            Q_lab[t_id] = 0.0
            S_lab[f_id] = 0.0
            Q_lab[f_id] = 0.0
            for j in range(n):
                row = rows[j]
                if lab[row] == split_label:
                    side = vals_t[split_var, row] < split_thr
                    goes_true[row] = side
                    nl = t_id if side else f_id
                    lab[row] = nl
                    n_lab[nl] += 1
                    S_lab[nl] += row_sum[row]
                    Q_lab[nl] += row_sumsq[row]
            if split_label == 0:
                live[0] = t_id
                live[1] = f_id
                n_live = 2
            else:
                pos = 0
                while live[pos] != split_label:
                    pos += 1
                for i in range(n_live - 1, pos, -1):
                    live[i + 1] = live[i]
                live[pos] = t_id
                live[pos + 1] = f_id
                n_live += 1
            open_t = not (max_depth >= 0 and d >= max_depth) and n_lab[t_id] >= 2 * min_rows
            open_f = not (max_depth >= 0 and d >= max_depth) and n_lab[f_id] >= 2 * min_rows
            lg[t_id] = -np.inf
            lv[t_id] = -1
            lg[f_id] = -np.inf
            lv[f_id] = -1
            if open_t or open_f:
                if step < lookahead - 1:
                    st = next_slot
                    sf = next_slot + 1
                    next_slot += 2
                    _partition(src, count, A, goes_true, sorted_rows[st], sorted_rows[sf])
                else:
                    # last step: children are searched but never split here
                    st = -1
                    sf = -2
                    _partition(src, count, A, goes_true, spare_t, spare_f)
                slot[t_id] = st
                slot[f_id] = sf
                rows_t = sorted_rows[st] if st >= 0 else spare_t
                rows_f = sorted_rows[sf] if st >= 0 else spare_f
                if open_t:
                    base[t_id] = _lml(n_lab[t_id], S_lab[t_id], Q_lab[t_id], tab, beta0)
                if open_f:
                    base[f_id] = _lml(n_lab[f_id], S_lab[f_id], Q_lab[f_id], tab, beta0)
                for a2 in range(A):
                    v2 = var_ids[a2]
                    # a variable only matters if it beats the best split found so far
                    if open_t:
                        bar = lg[t_id] + lam if lv[t_id] >= 0 else -np.inf
                        g, t, kk = _best_split(rows_t, a2, n_lab[t_id], v2, vals_t, row_sum,
                                               row_sumsq, S_lab[t_id], Q_lab[t_id], base[t_id],
                                               min_rows, tab, beta0, bar)
                        if kk >= 0:
                            gl = g - lam
                            if lv[t_id] < 0 or gl > lg[t_id]:
                                lg[t_id] = gl
                                lv[t_id] = v2
                                lt[t_id] = t
                    if open_f:
                        bar = lg[f_id] + lam if lv[f_id] >= 0 else -np.inf
                        g, t, kk = _best_split(rows_f, a2, n_lab[f_id], v2, vals_t, row_sum,
                                               row_sumsq, S_lab[f_id], Q_lab[f_id], base[f_id],
                                               min_rows, tab, beta0, bar)
                        if kk >= 0:
                            gl = g - lam
                            if lv[f_id] < 0 or gl > lg[f_id]:
                                lg[f_id] = gl
                                lv[f_id] = v2
                                lt[f_id] = t
            pick = -1
            for i in range(n_live):
                l = live[i]
                if lv[l] >= 0 and (pick < 0 or total + lg[l] > total + lg[pick]):
                    pick = l
            if pick < 0:
                break
            total += lg[pick]
            out_leaf[f, step] = pick
            out_var[f, step] = lv[pick]
            out_path_thr[f, step] = lt[pick]
            steps = step + 1
            if total > value:
                value = total
                best_len = step + 1
            split_label = pick
            split_var = lv[pick]
            split_thr = lt[pick]
        out_value[f] = value
        out_len[f] = best_len
        out_full[f] = steps
