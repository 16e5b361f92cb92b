"""Discrete optimal transport: cost matrices, an exact transportation-simplex
solver, and an entropic Sinkhorn solver.

Both solvers consume a dense cost matrix and marginal weight vectors and
return a :class:`Coupling` whose transport plan satisfies the prescribed
marginals (to 1e-12 for the exact solver, and to float round-off for the
Sinkhorn solver thanks to a final feasibility projection). The exact solver
is a tree-based network simplex over the transportation polytope; Sinkhorn
runs in scaled form with log-domain absorption so that small regularization
never underflows the kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError

_TINY = float(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class MarginalWeights:
    """Probability weights over the rows and columns of a cost matrix."""

    row_weights: np.ndarray
    col_weights: np.ndarray

    def __post_init__(self):
        for attr in ("row_weights", "col_weights"):
            w = np.asarray(getattr(self, attr), dtype=np.float64)
            if w.ndim != 1 or w.size < 1:
                raise ValueError(f"{attr} must be a non-empty vector")
            if not np.isfinite(w).all() or (w <= 0).any():
                raise ValueError(f"{attr} entries must be finite and > 0")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"{attr} sums to {w.sum()!r}, expected 1 within 1e-12")
            object.__setattr__(self, attr, w)

    @property
    def m(self) -> int:
        return self.row_weights.size

    @property
    def n(self) -> int:
        return self.col_weights.size


def uniform_marginals(m: int, n: int) -> MarginalWeights:
    return MarginalWeights(np.full(m, 1.0 / m), np.full(n, 1.0 / n))


@dataclass
class Coupling:
    """Transport plan with its cost and solver diagnostics.

    ``solver_info`` carries at least: solver tag, iteration count,
    ``marginal_violation`` of the returned plan, a ``converged`` flag, and
    the regularization ``epsilon`` for entropic solves.
    """

    pi: np.ndarray
    total_cost: float
    solver_info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SolverConfig:
    """Coupling solver policy.

    ``method='auto'`` uses the exact solver up to ``exact_size_limit`` cells
    and Sinkhorn above. ``epsilon`` is relative to the largest cost entry so
    one default survives arbitrary embedding scales.
    """

    method: str = "auto"
    epsilon: float = 0.1
    max_iters: int = 1000
    tol: float = 1e-9
    exact_size_limit: int = 90_000

    def __post_init__(self):
        if self.method not in ("auto", "exact", "sinkhorn"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")


def _check_cost(cost: np.ndarray) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError(f"cost must be a non-empty 2-D matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains non-finite entries")
    if (c < 0).any():
        raise ValueError("cost matrix contains negative entries")
    return c


def _check_instance(cost: np.ndarray, w: MarginalWeights) -> np.ndarray:
    c = _check_cost(cost)
    if c.shape != (w.m, w.n):
        raise ValueError(
            f"cost shape {c.shape} does not match marginals ({w.m}, {w.n})"
        )
    return c


def pairwise_sq_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense matrix of squared Euclidean distances between rows of a and b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("inputs must be 2-D matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"column counts differ: {a.shape[1]} vs {b.shape[1]}"
        )
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :]
    sq -= 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)   # absorb rounding below zero
    return sq


def transport_cost(pi: np.ndarray, cost: np.ndarray) -> float:
    """Frobenius inner product <pi, cost>."""
    pi = np.asarray(pi, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if pi.shape != cost.shape:
        raise ValueError(f"shape mismatch: {pi.shape} vs {cost.shape}")
    return float(np.einsum("ij,ij->", pi, cost))


def product_coupling(w: MarginalWeights) -> np.ndarray:
    return np.outer(w.row_weights, w.col_weights)


def _marginal_violation(pi: np.ndarray, w: MarginalWeights) -> float:
    return float(
        max(
            np.abs(pi.sum(axis=1) - w.row_weights).max(),
            np.abs(pi.sum(axis=0) - w.col_weights).max(),
        )
    )


# ---------------------------------------------------------------------------
# exact solver: transportation simplex on the basis tree
# ---------------------------------------------------------------------------

_BLAND_AFTER = 50          # consecutive degenerate pivots before Bland pricing
_PIVOT_SLACK = 10_000


def _least_cost_basis(C, a, b):
    """Initial basic feasible solution by the least-cost rule.

    Returns (flows dict, adjacency). Always yields m+n-1 arcs forming a
    spanning tree; ties in exhaustion retire the row so the column can still
    receive a degenerate zero arc.
    """
    m, n = C.shape
    W = C.copy()
    ra = a.copy()
    cb = b.copy()
    flow: dict[tuple[int, int], float] = {}
    adj: list[set[int]] = [set() for _ in range(m + n)]
    live_rows = m
    live_cols = n
    big = np.inf
    while live_rows + live_cols > 0:
        k = int(np.argmin(W))
        i, j = divmod(k, n)
        q = min(ra[i], cb[j])
        flow[(i, j)] = q
        adj[i].add(m + j)
        adj[m + j].add(i)
        if live_rows + live_cols == 2:
            break
        if live_cols == 1 or (ra[i] <= cb[j] and live_rows > 1):
            ra[i] = 0.0
            cb[j] -= q
            W[i, :] = big
            live_rows -= 1
        else:
            cb[j] = 0.0
            ra[i] -= q
            W[:, j] = big
            live_cols -= 1
    return flow, adj


def _tree_flows(adj, a, b, m, n):
    """Recompute basic flows exactly by leaf elimination on the basis tree."""
    N = m + n
    res = np.concatenate([a, -b])
    deg = np.array([len(s) for s in adj])
    local = [set(s) for s in adj]
    P = np.zeros((m, n))
    stack = [x for x in range(N) if deg[x] == 1]
    removed = 0
    while stack:
        x = stack.pop()
        if deg[x] != 1:
            continue
        y = next(iter(local[x]))
        if x < m:
            P[x, y - m] = res[x]
        else:
            P[y, x - m] = -res[x]
        res[y] += res[x]
        local[x].remove(y)
        local[y].remove(x)
        deg[x] -= 1
        deg[y] -= 1
        removed += 1
        if deg[y] == 1:
            stack.append(y)
    return P


def solve_exact(cost: np.ndarray, w: MarginalWeights) -> Coupling:
    """Optimal vertex of the transportation polytope via network simplex.

    Deterministic: entering arcs are chosen by most-negative reduced cost
    with lowest-flat-index tie-breaking, falling back to Bland's rule (first
    negative arc) after a run of degenerate pivots so cycling cannot occur.
    Marginals of the returned plan hold to 1e-12.
    """
    C = _check_instance(cost, w)
    m, n = C.shape
    a = w.row_weights
    b = w.col_weights
    N = m + n
    cmax = float(C.max())
    tol = 1e-12 * max(cmax, _TINY)

    flow, adj = _least_cost_basis(C, a, b)

    u = np.zeros(m)
    v = np.zeros(n)
    parent = [-1] * N

    def refresh_tree():
        """Parents and duals from scratch by BFS over the basis tree."""
        order = [0]
        seen = bytearray(N)
        seen[0] = 1
        parent[0] = -1
        qi = 0
        while qi < len(order):
            x = order[qi]
            qi += 1
            for y in adj[x]:
                if not seen[y]:
                    seen[y] = 1
                    parent[y] = x
                    order.append(y)
        for x in order[1:]:
            p = parent[x]
            if x >= m:
                v[x - m] = C[p, x - m] - u[p]
            else:
                u[x] = C[x, p - m] - v[p - m]

    refresh_tree()
    degen_run = 0
    pivots = 0
    max_pivots = 400 * N + _PIVOT_SLACK
    Rbuf = np.empty_like(C)
    while True:
        pivots += 1
        if pivots > max_pivots:
            raise NumericsError("transportation simplex exceeded its pivot budget")
        if pivots % 512 == 0:
            refresh_tree()   # cancel float drift accumulated by dual updates
        np.subtract(C, u[:, None], out=Rbuf)
        Rbuf -= v[None, :]
        if degen_run < _BLAND_AFTER:
            k = int(np.argmin(Rbuf))
            if Rbuf.flat[k] >= -tol:
                break
        else:
            neg = Rbuf.ravel() < -tol
            if not neg.any():
                break
            k = int(np.argmax(neg))
        ei, ej = divmod(k, n)
        r_enter = float(Rbuf[ei, ej])

        # cycle: tree path from the entering column node to the entering row
        pa = []
        x = ei
        while x != -1:
            pa.append(x)
            x = parent[x]
        in_pa = {node: t for t, node in enumerate(pa)}
        pb = []
        x = m + ej
        while x not in in_pa:
            pb.append(x)
            x = parent[x]
        path = pb + pa[in_pa[x]::-1]

        theta = np.inf
        leave_t = -1
        for t in range(0, len(path) - 1, 2):     # minus arcs sit at even offsets
            xx, yy = path[t], path[t + 1]
            arc = (yy, xx - m) if xx >= m else (xx, yy - m)
            f = flow[arc]
            if f < theta:
                theta = f
                leave_t = t
            elif f == theta and leave_t >= 0:
                cur = path[leave_t], path[leave_t + 1]
                cur_arc = (cur[1], cur[0] - m) if cur[0] >= m else (cur[0], cur[1] - m)
                if arc[0] * n + arc[1] < cur_arc[0] * n + cur_arc[1]:
                    leave_t = t
        degen_run = degen_run + 1 if theta <= 1e-15 else 0

        for t in range(len(path) - 1):
            xx, yy = path[t], path[t + 1]
            arc = (yy, xx - m) if xx >= m else (xx, yy - m)
            if t % 2 == 0:
                nf = flow[arc] - theta
                flow[arc] = nf if nf > 0.0 else 0.0
            else:
                flow[arc] += theta
        xx, yy = path[leave_t], path[leave_t + 1]
        l_arc = (yy, xx - m) if xx >= m else (xx, yy - m)
        del flow[l_arc]
        flow[(ei, ej)] = theta

        lr, lc_node = l_arc[0], m + l_arc[1]
        child = lr if parent[lr] == lc_node else lc_node
        adj[lr].discard(lc_node)
        adj[lc_node].discard(lr)

        # collect the severed subtree
        sub = [child]
        seen_sub = {child}
        qi = 0
        while qi < len(sub):
            x = sub[qi]
            qi += 1
            for y in adj[x]:
                if y not in seen_sub:
                    seen_sub.add(y)
                    sub.append(y)

        if ei in seen_sub:
            e_in, e_out = ei, m + ej
            sign = 1.0
        else:
            e_in, e_out = m + ej, ei
            sign = -1.0
        sub_rows = [x for x in sub if x < m]
        sub_cols = [x - m for x in sub if x >= m]
        if sub_rows:
            u[sub_rows] += sign * r_enter
        if sub_cols:
            v[sub_cols] -= sign * r_enter

        # re-root the subtree at the entering endpoint
        prev = e_out
        cur = e_in
        while True:
            nxt = parent[cur]
            parent[cur] = prev
            if cur == child:
                break
            prev = cur
            cur = nxt
        adj[ei].add(m + ej)
        adj[m + ej].add(ei)

    P = _tree_flows(adj, a, b, m, n)
    neg = P.min()
    if neg < -1e-9 * max(a.max(), b.max()):
        raise NumericsError(f"simplex produced a negative flow of {neg!r}")
    np.maximum(P, 0.0, out=P)
    violation = _marginal_violation(P, w)
    if violation > 1e-12:
        raise NumericsError(
            f"exact solver marginal violation {violation:.3e} exceeds 1e-12"
        )
    return Coupling(
        pi=P,
        total_cost=transport_cost(P, C),
        solver_info={
            "solver": "exact",
            "iterations": pivots,
            "marginal_violation": violation,
            "converged": True,
        },
    )


# ---------------------------------------------------------------------------
# entropic solver: stabilized Sinkhorn
# ---------------------------------------------------------------------------

_ABSORB_AT = 1e6


def _round_to_feasible(P, a, b):
    """Project a nonnegative plan onto the transportation polytope.

    Scales rows then columns down to their targets and spreads the leftover
    mass as a rank-one correction, leaving marginals exact to round-off.
    """
    rs = P.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(rs > 0, np.minimum(1.0, a / rs), 1.0)
    X = P * scale[:, None]
    cs = X.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(cs > 0, np.minimum(1.0, b / cs), 1.0)
    X *= scale[None, :]
    ea = a - X.sum(axis=1)
    eb = b - X.sum(axis=0)
    mass = ea.sum()
    if mass > 0:
        X += np.outer(ea, eb / mass)
    return X


def solve_sinkhorn(
    cost: np.ndarray,
    w: MarginalWeights,
    epsilon: float,
    max_iters: int = 1000,
    tol: float = 1e-9,
) -> Coupling:
    """Entropic-regularized coupling via stabilized Sinkhorn iteration.

    Scaling vectors are absorbed into log-domain potentials whenever they
    grow past a threshold, so the kernel exp((f+g-C)/eps) stays representable
    for arbitrarily small ``epsilon``. Stops when the max marginal violation
    of the iterate drops below ``tol`` or after ``max_iters`` sweeps; which
    one happened is recorded in ``solver_info`` (non-convergence is a warning
    flag, not an error). The returned plan is projected onto exact marginals;
    the pre-projection residual is reported as ``residual``.

    Raises ``NumericsError`` if iterates turn non-finite (epsilon far too
    small for the cost scale).
    """
    C = _check_instance(cost, w)
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    m, n = C.shape
    a = w.row_weights
    b = w.col_weights

    f = np.zeros(m)
    g = np.zeros(n)
    u = np.ones(m)
    v = np.ones(n)
    K = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    Ktu = K.T @ u
    it = 0
    err = np.inf
    converged = False
    while it < max_iters:
        it += 1
        v = b / np.maximum(Ktu, _TINY)
        u = a / np.maximum(K @ v, _TINY)
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise NumericsError(
                "Sinkhorn iterates became non-finite; epsilon is too small "
                "for this cost scale"
            )
        if max(u.max(), v.max()) > _ABSORB_AT:
            f += epsilon * np.log(u)
            g += epsilon * np.log(v)
            K = np.exp((f[:, None] + g[None, :] - C) / epsilon)
            u = np.ones(m)
            v = np.ones(n)
        Ktu = K.T @ u
        err = float(np.abs(v * Ktu - b).max())
        if err < tol:
            converged = True
            break

    P = (u[:, None] * K) * v[None, :]
    P = _round_to_feasible(P, a, b)
    info = {
        "solver": "sinkhorn",
        "iterations": it,
        "epsilon": float(epsilon),
        "converged": converged,
        "residual": err,
        "marginal_violation": _marginal_violation(P, w),
    }
    if not converged:
        info["warning"] = (
            f"did not reach tol={tol:g} within {max_iters} iterations "
            f"(residual {err:.3e})"
        )
    return Coupling(pi=P, total_cost=transport_cost(P, C), solver_info=info)


def solve_auto(
    cost: np.ndarray,
    w: MarginalWeights,
    config: SolverConfig = SolverConfig(),
) -> Coupling:
    """Solve with the configured policy.

    ``auto`` routes to the exact solver while the instance has at most
    ``exact_size_limit`` cells; Sinkhorn otherwise, with the regularization
    ``config.epsilon`` scaled by the largest cost entry so behaviour does not
    depend on embedding units.
    """
    C = _check_instance(cost, w)
    method = config.method
    if method == "auto":
        method = "exact" if C.size <= config.exact_size_limit else "sinkhorn"
    if method == "exact":
        return solve_exact(C, w)
    cmax = float(C.max())
    if cmax == 0.0:
        pi = product_coupling(w)
        return Coupling(
            pi=pi,
            total_cost=0.0,
            solver_info={
                "solver": "sinkhorn",
                "iterations": 0,
                "epsilon": 0.0,
                "converged": True,
                "residual": 0.0,
                "marginal_violation": _marginal_violation(pi, w),
            },
        )
    return solve_sinkhorn(
        C, w, epsilon=config.epsilon * cmax, max_iters=config.max_iters, tol=config.tol
    )
