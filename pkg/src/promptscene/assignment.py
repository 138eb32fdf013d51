"""Minimum-cost bipartite assignment with a deterministic tie-break.

The core solver is the shortest-augmenting-path method with dual potentials
(O(n^2 m)). On top of it, `hungarian` returns the lexicographically smallest
optimal assignment: pairs are fixed greedily in row-major cell order whenever
an optimal completion still exists.
"""

from __future__ import annotations

import numpy as np


def _solve(cost):
    """Optimal column per row for an (n, m) matrix with n <= m."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    u = np.zeros(n)
    v = np.zeros(m)
    path = np.full(m, -1, dtype=np.int64)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(m, -1, dtype=np.int64)
    for cur_row in range(n):
        min_val = 0.0
        i = cur_row
        done_cols = np.zeros(m, dtype=bool)
        scanned_rows = np.zeros(n, dtype=bool)
        shortest = np.full(m, np.inf)
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            r = min_val + cost[i] - u[i] - v
            upd = ~done_cols & (r < shortest)
            shortest[upd] = r[upd]
            path[upd] = i
            masked = np.where(done_cols, np.inf, shortest)
            j = int(np.argmin(masked))
            min_val = float(masked[j])
            if not np.isfinite(min_val):
                raise ValueError("infeasible cost matrix")
            done_cols[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
        u[cur_row] += min_val
        for rr in np.nonzero(scanned_rows)[0]:
            if rr != cur_row:
                u[rr] += min_val - shortest[col4row[rr]]
        sc = np.nonzero(done_cols)[0]
        v[sc] -= min_val - shortest[sc]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row


def _pairs_total(cost, pairs):
    if not pairs:
        return 0.0
    rows = np.array([p[0] for p in pairs])
    cols = np.array([p[1] for p in pairs])
    return float(cost[rows, cols].sum())


def _optimal_pairs(cost):
    q, g = cost.shape
    if q <= g:
        col4row = _solve(cost)
        return sorted((r, int(c)) for r, c in enumerate(col4row))
    row4col = _solve(cost.T)
    return sorted((int(r), c) for c, r in enumerate(row4col))


def solve_min_cost(cost):
    """One optimal assignment (list of (row, col), sorted by row) and its total."""
    pairs = _optimal_pairs(cost)
    return pairs, _pairs_total(cost, pairs)


def hungarian(cost):
    """Lexicographically smallest minimum-cost assignment of size min(Q, G).

    Among all assignments reaching the optimal total, the returned pair list
    (sorted by row) is the smallest sequence of (row, col) tuples. Raises on
    empty or non-finite input.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError("cost matrix must be a non-empty 2-D array")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    q, g = cost.shape
    k = min(q, g)
    base_pairs, best = solve_min_cost(cost)
    if k == 1:
        # fast path: smallest (row, col) among the minima
        r, c = divmod(int(np.argmin(cost)), g)
        return [(r, c)]

    fixed = []
    used_rows, used_cols = set(), set()

    def completion_total(extra_row=None, extra_col=None):
        rows = used_rows | ({extra_row} if extra_row is not None else set())
        cols = used_cols | ({extra_col} if extra_col is not None else set())
        keep_r = [r for r in range(q) if r not in rows]
        keep_c = [c for c in range(g) if c not in cols]
        head = _pairs_total(cost, fixed)
        if extra_row is not None:
            head += float(cost[extra_row, extra_col])
        if min(len(keep_r), len(keep_c)) == 0:
            return head
        sub = cost[np.ix_(keep_r, keep_c)]
        _, sub_total = solve_min_cost(sub)
        return head + sub_total

    tol = 1e-9 * max(1.0, abs(best))
    for r in range(q):
        if len(fixed) == k:
            break
        for c in range(g):
            if c in used_cols:
                continue
            if completion_total(r, c) <= best + tol:
                fixed.append((r, c))
                used_rows.add(r)
                used_cols.add(c)
                break
    if len(fixed) != k:  # numeric fallback: keep the solver's assignment
        return base_pairs
    return fixed
