"""Exact Earth Mover's distance between uniform-weight point sets.

The general solver is a transportation simplex (MODI potentials, Vogel start).
Supplies and demands are scaled to integers (``n_b`` per source row, ``n_a``
per sink column), so every basic flow stays an exact integer in float64 and
degenerate pivots cannot drift. Equal-size sets take an assignment fast path:
with uniform weights the transportation polytope is a scaled Birkhoff
polytope, so an optimal permutation is an optimal plan.
"""
from __future__ import annotations

from collections import deque

import numpy as np
from scipy.optimize import linear_sum_assignment

_RC_TOL = 1e-12


def _as_points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"{name}: expected a non-empty (n, d) point set, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite coordinates")
    return a


def ground_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between rows of ``a`` and rows of ``b``."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _vogel(supply: np.ndarray, demand: np.ndarray, cost: np.ndarray):
    n, m = cost.shape
    s, d = supply.copy(), demand.copy()
    flow = np.zeros((n, m))
    basis: list[tuple[int, int]] = []
    row_open = np.ones(n, bool)
    col_open = np.ones(m, bool)
    big = np.inf

    def penalty(vals):
        if vals.size == 0:
            return -1.0
        if vals.size == 1:
            return vals[0]
        two = np.partition(vals, 1)[:2]
        return two[1] - two[0]

    while row_open.any() and col_open.any():
        sub = np.where(row_open[:, None] & col_open[None, :], cost, big)
        rp = np.array([penalty(sub[i][col_open]) if row_open[i] else -1.0 for i in range(n)])
        cp = np.array([penalty(sub[:, j][row_open]) if col_open[j] else -1.0 for j in range(m)])
        if rp.max() >= cp.max():
            i = int(np.argmax(rp))
            j = int(np.argmin(sub[i]))
        else:
            j = int(np.argmax(cp))
            i = int(np.argmin(sub[:, j]))
        q = min(s[i], d[j])
        flow[i, j] = q
        basis.append((i, j))
        s[i] -= q
        d[j] -= q
        # close exactly one line per allocation so the basis ends with n+m-1 cells
        if s[i] == 0 and (d[j] != 0 or row_open.sum() > 1):
            row_open[i] = False
        else:
            col_open[j] = False
    return flow, basis


def _complete_basis(basis: list[tuple[int, int]], n: int, m: int, cost: np.ndarray):
    """Add zero-flow cells until the basis is a spanning tree on n + m nodes."""
    parent = list(range(n + m))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    tree = []
    for i, j in basis:
        ri, rj = find(i), find(n + j)
        if ri != rj:
            parent[ri] = rj
            tree.append((i, j))
    if len(tree) < n + m - 1:
        order = np.argsort(cost, axis=None, kind="stable")
        for flat in order:
            i, j = divmod(int(flat), m)
            ri, rj = find(i), find(n + j)
            if ri != rj:
                parent[ri] = rj
                tree.append((i, j))
                if len(tree) == n + m - 1:
                    break
    return tree


def _tree_path(adj: list[list[int]], start: int, goal: int) -> list[int]:
    prev = {start: -1}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt in adj[node]:
            if nxt not in prev:
                prev[nxt] = node
                queue.append(nxt)
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return path[::-1]


def transportation_simplex(supply, demand, cost, max_iter: int = 100_000) -> np.ndarray:
    """Optimal flow for a balanced transportation problem.

    Entering arc: most negative reduced cost, ties to the lowest row-major
    index. After many consecutive degenerate pivots the rule switches to the
    first negative arc (Bland) so the method always terminates.
    """
    supply = np.asarray(supply, dtype=np.float64)
    demand = np.asarray(demand, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if not np.isclose(supply.sum(), demand.sum()):
        raise ValueError("unbalanced transportation problem")
    flow, basis = _vogel(supply, demand, cost)
    basis = _complete_basis(basis, n, m, cost)
    in_basis = np.zeros((n, m), bool)
    for i, j in basis:
        in_basis[i, j] = True
    degenerate_run = 0
    for _ in range(max_iter):
        adj: list[list[int]] = [[] for _ in range(n + m)]
        for i, j in zip(*np.nonzero(in_basis)):
            adj[i].append(n + j)
            adj[n + j].append(i)
        # potentials: u_i + v_j = c_ij on basic cells, u_0 = 0
        pot = np.full(n + m, np.nan)
        pot[0] = 0.0
        queue = deque([0])
        while queue:
            a = queue.popleft()
            for b in adj[a]:
                if np.isnan(pot[b]):
                    i, j = (a, b - n) if a < n else (b, a - n)
                    pot[b] = cost[i, j] - pot[a]
                    queue.append(b)
        reduced = cost - pot[:n, None] - pot[None, n:]
        reduced[in_basis] = 0.0
        if degenerate_run > 50:
            neg = np.flatnonzero(reduced < -_RC_TOL)
            if neg.size == 0:
                return flow
            flat = int(neg[0])
        else:
            flat = int(np.argmin(reduced))
            if reduced.flat[flat] >= -_RC_TOL:
                return flow
        ei, ej = divmod(flat, m)
        path = _tree_path(adj, n + ej, ei)  # column ej ... row ei
        # cycle cells: (ei, ej) is '+', then alternate along the path back to ej
        cells = []
        for a, b in zip(path[:-1], path[1:]):
            cells.append((b, a - n) if a >= n else (a, b - n))
        cells = cells[::-1]  # starting from the cell touching row ei
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flow[c] for c in minus)
        leave = min((c for c in minus if flow[c] == theta), key=lambda c: c[0] * m + c[1])
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[ei, ej] += theta
        in_basis[leave] = False
        in_basis[ei, ej] = True
        degenerate_run = degenerate_run + 1 if theta == 0 else 0
    raise RuntimeError("transportation simplex did not converge")


def emd(a, b, method: str = "auto") -> float:
    """Earth Mover's distance with uniform weights and Euclidean ground cost.

    ``method`` is ``"auto"`` (assignment when sizes match, else simplex),
    ``"simplex"`` or ``"assignment"``.
    """
    a = _as_points(a, "emd(a)")
    b = _as_points(b, "emd(b)")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"emd: dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    cost = ground_cost(a, b)
    na, nb = len(a), len(b)
    if method == "assignment" or (method == "auto" and na == nb):
        if na != nb:
            raise ValueError("assignment method needs equal set sizes")
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum() / na)
    if method not in ("auto", "simplex"):
        raise ValueError(f"unknown method {method!r}")
    flow = transportation_simplex(np.full(na, float(nb)), np.full(nb, float(na)), cost)
    return float((flow * cost).sum() / (na * nb))


def pairwise_emd(sets, method: str = "auto") -> np.ndarray:
    """Symmetric N x N matrix of EMDs; each unordered pair is solved once."""
    pts = [_as_points(s, f"set {k}") for k, s in enumerate(sets)]
    dims = {p.shape[1] for p in pts}
    if len(dims) != 1:
        raise ValueError(f"pairwise_emd: sets have differing dimensions {sorted(dims)}")
    n = len(pts)
    s = np.zeros((n, n))
    sizes = {len(p) for p in pts}
    if method in ("auto", "assignment") and len(sizes) == 1:
        # ground costs block-row by block-row from Gram products; one assignment per pair
        k = len(pts[0])
        flat = np.concatenate(pts)
        sq = np.einsum("ij,ij->i", flat, flat)
        rows = np.arange(k)
        for i in range(n - 1):
            a, rest = flat[i * k:(i + 1) * k], flat[(i + 1) * k:]
            d2 = sq[i * k:(i + 1) * k, None] + sq[None, (i + 1) * k:] - 2.0 * (a @ rest.T)
            cost = np.sqrt(np.maximum(d2, 0.0))
            for j in range(i + 1, n):
                cm = cost[:, (j - i - 1) * k:(j - i) * k]
                _, c = linear_sum_assignment(cm)
                s[i, j] = s[j, i] = cm[rows, c].sum() / k
        return s
    for i in range(n):
        for j in range(i + 1, n):
            try:
                s[i, j] = s[j, i] = emd(pts[i], pts[j], method=method)
            except Exception as exc:
                raise type(exc)(f"pair ({i}, {j}): {exc}") from exc
    return s
