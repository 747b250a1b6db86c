"""Compiled Metropolis loop for cLHS.

The chain keeps stratum counts, category counts and the first/second moment
sums of the selected rows so that each swap costs ``O(D^2)``.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _objective(counts, active, cat_counts, pop_prop, S, Q, n, var_floor,
               target, w1, w2, w3):
    D = counts.shape[0]
    o1 = 0.0
    for d in range(D):
        if active[d]:
            for s in range(counts.shape[1]):
                o1 += abs(counts[d, s] - 1)
    o2 = 0.0
    for c in range(cat_counts.shape[0]):
        o2 += abs(cat_counts[c] / n - pop_prop[c])
    o3 = 0.0
    Dc = S.shape[0]
    if n >= 3 and w3 != 0.0:
        var = np.empty(Dc)
        for i in range(Dc):
            var[i] = (Q[i, i] - S[i] * S[i] / n) / (n - 1)
        for i in range(Dc):
            if var[i] <= var_floor[i]:
                continue
            for j in range(i + 1, Dc):
                if var[j] <= var_floor[j]:
                    continue
                cov = (Q[i, j] - S[i] * S[j] / n) / (n - 1)
                o3 += abs(cov / np.sqrt(var[i] * var[j]) - target[i, j])
    return w1 * o1 + w2 * o2 + w3 * o3


@njit(cache=True)
def _moments(Xc, selected, S, Q):
    S[:] = 0.0
    Q[:, :] = 0.0
    Dc = Xc.shape[1]
    for k in range(selected.shape[0]):
        r = selected[k]
        for i in range(Dc):
            S[i] += Xc[r, i]
            for j in range(Dc):
                Q[i, j] += Xc[r, i] * Xc[r, j]


@njit(cache=True)
def _update(r, sign, strata, counts, cats, cat_counts, Xc, S, Q):
    for d in range(strata.shape[1]):
        counts[d, strata[r, d]] += sign
    for c in range(cats.shape[1]):
        cat_counts[cats[r, c]] += sign
    Dc = Xc.shape[1]
    for i in range(Dc):
        S[i] += sign * Xc[r, i]
        for j in range(Dc):
            Q[i, j] += sign * Xc[r, i] * Xc[r, j]


@njit(cache=True, nogil=True)
def run_chain(strata, active, cats, pop_prop, Xc, var_floor, target,
              w1, w2, w3, n_strata, init, unselected,
              t0, cooling, epochs, moves_per_temp, p_worst, uniforms):
    n = init.shape[0]
    D = strata.shape[1]
    selected = init.copy()
    pool = unselected.copy()
    counts = np.zeros((D, n_strata), dtype=np.int64)
    cat_counts = np.zeros(pop_prop.shape[0])
    Dc = Xc.shape[1]
    S = np.zeros(Dc)
    Q = np.zeros((Dc, Dc))
    for k in range(n):
        _update(selected[k], 1, strata, counts, cats, cat_counts, Xc, S, Q)
    current = _objective(counts, active, cat_counts, pop_prop, S, Q, n,
                         var_floor, target, w1, w2, w3)
    best = current
    best_sel = selected.copy()
    n_active = 0
    for d in range(D):
        if active[d]:
            n_active += 1
    trace = np.empty((epochs + 1, 4))
    trace[0, 0] = 0.0
    trace[0, 1] = t0
    trace[0, 2] = current
    trace[0, 3] = best
    cand = np.empty(n, dtype=np.int64)
    m = 0
    for e in range(epochs):
        T = t0 * cooling ** e
        for _ in range(moves_per_temp):
            u = uniforms[m]
            m += 1
            # choose the position in `selected` to drop
            pos = min(int(u[1] * n), n - 1)
            if n_active > 0 and u[0] < p_worst:
                a = min(int(u[4] * n_active), n_active - 1)
                d = 0
                for dd in range(D):
                    if active[dd]:
                        if a == 0:
                            d = dd
                            break
                        a -= 1
                worst = 0
                for s in range(n_strata):
                    if counts[d, s] > counts[d, worst]:
                        worst = s
                if counts[d, worst] > 1:
                    nc = 0
                    for k in range(n):
                        if strata[selected[k], d] == worst:
                            cand[nc] = k
                            nc += 1
                    pos = cand[min(int(u[1] * nc), nc - 1)]
            ins = min(int(u[2] * pool.shape[0]), pool.shape[0] - 1)
            out_r = selected[pos]
            in_r = pool[ins]
            _update(out_r, -1, strata, counts, cats, cat_counts, Xc, S, Q)
            _update(in_r, 1, strata, counts, cats, cat_counts, Xc, S, Q)
            new = _objective(counts, active, cat_counts, pop_prop, S, Q, n,
                             var_floor, target, w1, w2, w3)
            delta = new - current
            if delta <= 0.0 or (T > 0.0 and u[3] < np.exp(-delta / T)):
                selected[pos] = in_r
                pool[ins] = out_r
                current = new
                if current < best:
                    best = current
                    best_sel[:] = selected
            else:
                _update(in_r, -1, strata, counts, cats, cat_counts, Xc, S, Q)
                _update(out_r, 1, strata, counts, cats, cat_counts, Xc, S, Q)
        # refresh the moment sums to stop round-off drift
        _moments(Xc, selected, S, Q)
        current = _objective(counts, active, cat_counts, pop_prop, S, Q, n,
                             var_floor, target, w1, w2, w3)
        if current < best:
            best = current
            best_sel[:] = selected
        trace[e + 1, 0] = (e + 1) * moves_per_temp
        trace[e + 1, 1] = T
        trace[e + 1, 2] = current
        trace[e + 1, 3] = best
    return best_sel, best, trace
