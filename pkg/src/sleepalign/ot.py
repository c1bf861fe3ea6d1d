"""Earth Mover's Distance between feature batches.

The exact solver is a transportation simplex (Vogel's approximation start,
tree-structured basis, Bland's rule fallback against cycling) and certifies
optimality through its dual potentials. A log-domain Sinkhorn gives an
entropic approximation for large instances; its plan is rounded back onto the
transportation polytope so the reported value is always feasible-primal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

REWARD_FLOOR = 1e-9

METRICS = ("euclidean", "sqeuclidean", "cosine")


class OtError(Exception):
    pass


@dataclass
class CostMatrix:
    values: np.ndarray  # (m, n), finite, >= 0
    metric: str

    @property
    def shape(self):
        return self.values.shape


@dataclass
class TransportPlan:
    flows: np.ndarray  # (m, n), >= 0
    w_src: np.ndarray  # (m,), sums to 1
    w_tgt: np.ndarray  # (n,), sums to 1

    def marginal_violation(self) -> float:
        row = np.abs(self.flows.sum(axis=1) - self.w_src).max()
        col = np.abs(self.flows.sum(axis=0) - self.w_tgt).max()
        return float(max(row, col))


@dataclass
class EmdResult:
    value: float
    plan: TransportPlan
    solver: str  # "exact" | "sinkhorn(eps)"
    iterations: int
    converged: bool = True
    # dual potentials (exact solver only); certify optimality via
    # u_i + v_j <= d_ij with equality on the support
    u: np.ndarray | None = None
    v: np.ndarray | None = None


def cost_matrix(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> CostMatrix:
    """Pairwise ground distances between two feature batches (rows)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise OtError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise OtError("non-finite feature values")
    if metric not in METRICS:
        raise OtError(f"unknown metric {metric!r}; choose from {METRICS}")
    if metric in ("euclidean", "sqeuclidean"):
        # direct differences (chunked): exact zeros on identical rows, unlike
        # the |a|^2 - 2ab + |b|^2 expansion
        c = np.empty((a.shape[0], b.shape[0]))
        chunk = max(1, (1 << 24) // max(1, b.shape[0] * a.shape[1]))
        for s in range(0, a.shape[0], chunk):
            d = a[s : s + chunk, None, :] - b[None, :, :]
            c[s : s + chunk] = np.sum(d * d, axis=2)
        if metric == "euclidean":
            np.sqrt(c, out=c)
    else:  # cosine
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        denom = np.outer(na, nb)
        denom[denom == 0] = 1.0
        c = 1.0 - (a @ b.T) / denom
        np.maximum(c, 0.0, out=c)
    return CostMatrix(values=c, metric=metric)


def _normalize_weights(w, n, name):
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise OtError(f"{name} has shape {w.shape}, expected ({n},)")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise OtError(f"{name} must be nonnegative and finite")
    s = w.sum()
    if s <= 0:
        raise OtError(f"{name} sums to {s}, cannot normalize")
    return w / s


def _vogel_init(c: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Vogel's approximation: repeatedly allocate in the row/column with the
    largest regret (gap between its two cheapest open cells)."""
    m, n = c.shape
    supply = a.copy()
    demand = b.copy()
    row_open = np.ones(m, dtype=bool)
    col_open = np.ones(n, dtype=bool)
    flows = np.zeros((m, n))
    basis = []

    def penalties(values):
        # values: masked costs along one line; regret of the two smallest
        if values.size == 0:
            return -1.0
        if values.size == 1:
            return float(values[0])
        two = np.partition(values, 1)[:2]
        return float(two[1] - two[0])

    big = np.inf
    while row_open.any() and col_open.any():
        open_cols = np.flatnonzero(col_open)
        open_rows = np.flatnonzero(row_open)
        best = (-1.0, None)  # (penalty, (kind, index))
        for i in open_rows:
            p = penalties(c[i, open_cols])
            if p > best[0]:
                best = (p, ("row", i))
        for j in open_cols:
            p = penalties(c[open_rows, j])
            if p > best[0]:
                best = (p, ("col", j))
        kind, idx = best[1]
        if kind == "row":
            i = idx
            j = open_cols[np.argmin(c[i, open_cols])]
        else:
            j = idx
            i = open_rows[np.argmin(c[open_rows, j])]
        amt = min(supply[i], demand[j])
        flows[i, j] = amt
        basis.append((i, j))
        supply[i] -= amt
        demand[j] -= amt
        # close exactly one line per allocation (keeps the basis a tree);
        # at the very end both may close
        if supply[i] <= demand[j] and row_open.sum() > 1:
            row_open[i] = False
        elif col_open.sum() > 1:
            col_open[j] = False
        else:
            row_open[i] = False
            col_open[j] = False
    return flows, basis


def _complete_basis(basis, m, n):
    """Pad a short basis with zero-flow cells until it spans all m+n nodes."""
    parent = list(range(m + n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx == ry:
            return False
        parent[rx] = ry
        return True

    kept = []
    for (i, j) in basis:
        if union(i, m + j):
            kept.append((i, j))
    if len(kept) < m + n - 1:
        for i in range(m):
            for j in range(n):
                if len(kept) == m + n - 1:
                    break
                if union(i, m + j):
                    kept.append((i, j))
    return kept


def _tree_adjacency(basis, m, n):
    adj = [[] for _ in range(m + n)]
    for (i, j) in basis:
        adj[i].append((m + j, (i, j)))
        adj[m + j].append((i, (i, j)))
    return adj


def _compute_duals(basis, c, m, n):
    adj = _tree_adjacency(basis, m, n)
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    stack = [0]
    seen = [False] * (m + n)
    seen[0] = True
    while stack:
        node = stack.pop()
        for nxt, (i, j) in adj[node]:
            if seen[nxt]:
                continue
            seen[nxt] = True
            if nxt >= m:  # column node: v_j = c_ij - u_i
                v[nxt - m] = c[i, j] - u[i]
            else:
                u[nxt] = c[i, j] - v[j]
            stack.append(nxt)
    return u, v


def _find_cycle(basis, entering, m, n):
    """Path in the basis tree from the entering cell's row node to its column
    node; the entering edge closes it into the pivot cycle."""
    i0, j0 = entering
    adj = _tree_adjacency(basis, m, n)
    target = m + j0
    prev = {i0: None}
    stack = [i0]
    while stack:
        node = stack.pop()
        if node == target:
            break
        for nxt, cell in adj[node]:
            if nxt not in prev:
                prev[nxt] = (node, cell)
                stack.append(nxt)
    path_cells = []
    node = target
    while prev[node] is not None:
        node, cell = prev[node]
        path_cells.append(cell)
    path_cells.reverse()
    # cycle: entering edge (+), then alternate - / + along the path
    cycle = [(entering, +1)]
    sign = -1
    for cell in path_cells:
        cycle.append((cell, sign))
        sign = -sign
    return cycle


def emd_exact(
    cost: CostMatrix | np.ndarray,
    w_src: np.ndarray | None = None,
    w_tgt: np.ndarray | None = None,
    max_iter: int = 100_000,
) -> EmdResult:
    """Exact EMD by the transportation simplex.

    Weights default to uniform and are renormalized to sum to 1. The result
    carries dual potentials satisfying u_i + v_j <= c_ij with equality on the
    plan's support.
    """
    c = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise OtError(f"cost matrix must be 2-D and nonempty, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise OtError("non-finite entries in cost matrix")
    m, n = c.shape
    a = _normalize_weights(w_src, m, "w_src")
    b = _normalize_weights(w_tgt, n, "w_tgt")

    # degenerate single-row/column instances have a closed form
    if m == 1 or n == 1:
        flows = np.outer(a, b)
        plan = TransportPlan(flows=flows, w_src=a, w_tgt=b)
        value = float((flows * c).sum())
        u = np.zeros(m)
        v = c[0, :].copy() if m == 1 else None
        if n == 1:
            u = c[:, 0].copy()
            v = np.zeros(1)
        return EmdResult(value=value, plan=plan, solver="exact", iterations=0,
                         u=u, v=v)

    flows, basis = _vogel_init(c, a, b)
    basis = _complete_basis(basis, m, n)

    scale = max(1.0, float(np.abs(c).max()))
    tol = 1e-12 * scale
    bland_after = 10 * (m + n)  # switch to Bland's rule if Dantzig stalls
    it = 0
    while it < max_iter:
        it += 1
        u, v = _compute_duals(basis, c, m, n)
        reduced = c - u[:, None] - v[None, :]
        for (i, j) in basis:
            reduced[i, j] = 0.0
        if it <= bland_after:
            flat = np.argmin(reduced)
            i0, j0 = divmod(int(flat), n)
            if reduced[i0, j0] >= -tol:
                break
        else:
            neg = np.argwhere(reduced < -tol)
            if neg.size == 0:
                break
            i0, j0 = map(int, neg[0])  # Bland: smallest row-major index
        entering = (i0, j0)
        cycle = _find_cycle(basis, entering, m, n)
        minus = [(cell, flows[cell]) for cell, s in cycle if s < 0]
        theta = min(f for _, f in minus)
        leaving = min(cell for cell, f in minus if f == theta)
        for cell, s in cycle:
            flows[cell] += s * theta
        flows[leaving] = 0.0
        basis.remove(leaving)
        basis.append(entering)
    else:
        raise OtError(f"transportation simplex did not terminate in {max_iter} pivots")

    np.maximum(flows, 0.0, out=flows)
    u, v = _compute_duals(basis, c, m, n)
    plan = TransportPlan(flows=flows, w_src=a, w_tgt=b)
    value = float((flows * c).sum())
    return EmdResult(value=value, plan=plan, solver="exact", iterations=it, u=u, v=v)


def _round_to_polytope(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project an approximate coupling onto exact marginals (scale rows and
    columns down, then spread the residual as a rank-one correction)."""
    row = p.sum(axis=1)
    scale_r = np.minimum(1.0, np.divide(a, row, out=np.ones_like(a), where=row > 0))
    p = p * scale_r[:, None]
    col = p.sum(axis=0)
    scale_c = np.minimum(1.0, np.divide(b, col, out=np.ones_like(b), where=col > 0))
    p = p * scale_c[None, :]
    err_a = a - p.sum(axis=1)
    err_b = b - p.sum(axis=0)
    s = err_a.sum()
    if s > 0:
        p = p + np.outer(err_a, err_b) / s
    return p


def emd_sinkhorn(
    cost: CostMatrix | np.ndarray,
    w_src: np.ndarray | None = None,
    w_tgt: np.ndarray | None = None,
    eps: float = 0.01,
    max_iter: int = 20_000,
    tol: float = 1e-9,
) -> EmdResult:
    """Entropic OT by log-domain Sinkhorn iterations.

    Reported value is sum(f * d) of the plan rounded back to exact marginals.
    Non-convergence within max_iter flags the result instead of raising.
    """
    c = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise OtError(f"cost matrix must be 2-D and nonempty, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise OtError("non-finite entries in cost matrix")
    if eps <= 0:
        raise OtError(f"eps must be > 0, got {eps}")
    m, n = c.shape
    a = _normalize_weights(w_src, m, "w_src")
    b = _normalize_weights(w_tgt, n, "w_tgt")

    log_a = np.log(a)
    log_b = np.log(b)
    f = np.zeros(m)
    g = np.zeros(n)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = eps * (log_a - logsumexp((g[None, :] - c) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - c) / eps, axis=0))
        p = np.exp((f[:, None] + g[None, :] - c) / eps)
        violation = np.abs(p.sum(axis=1) - a).sum() + np.abs(p.sum(axis=0) - b).sum()
        if violation <= tol:
            converged = True
            break
    p = _round_to_polytope(p, a, b)
    plan = TransportPlan(flows=p, w_src=a, w_tgt=b)
    value = float((p * c).sum())
    return EmdResult(value=value, plan=plan, solver=f"sinkhorn({eps:g})",
                     iterations=it, converged=converged)


def reward(emd_value: float, floor: float = REWARD_FLOOR) -> float:
    """R = 1 / (EMD + floor); the floor keeps R finite when EMD is 0."""
    if emd_value < 0:
        raise OtError(f"EMD value must be >= 0, got {emd_value}")
    return 1.0 / (emd_value + floor)
