"""Congestion-unaware pooling assignment by greedy allocation, and its fixed-point loop.

Pairs are scored by the unit improvement of the relaxed cost ``t^T X 1``
under a frozen travel-time vector, so each score is a difference of
shortest-path costs. The greedy pass then allocates as much demand as
possible to the best remaining pair, like the fractional knapsack greedy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .congestion import PwlTravelTime, arc_times
from .demand import build_demand_matrix, leg_matrix
from .joint_qp import FlowSolution, RoutingSolver
from .network import Network, all_pairs_times
from .pooling import ConfigCatalog, pool_probability

log = logging.getLogger(__name__)


def column_costs(catalog: ConfigCatalog, T) -> np.ndarray:
    """Vehicle cost of one unit of each catalog column under the time matrix ``T``."""
    col, lo, ld = catalog.leg_arrays()
    cost = np.zeros(len(catalog))
    np.add.at(cost, col, T[lo, ld])
    return cost


@dataclass
class PairScores:
    """Best column and unit improvement for every cataloged pair ``m <= n``."""

    m: np.ndarray
    n: np.ndarray
    delta: np.ndarray
    best: np.ndarray  # catalog column index of the cheapest feasible configuration
    pooled_cost: np.ndarray
    unpooled_cost: np.ndarray

    def as_dict(self) -> dict:
        return {(int(a), int(b)): (float(d), int(k)) for a, b, d, k in
                zip(self.m, self.n, self.delta, self.best)}


def score_pairs(catalog: ConfigCatalog, network: Network, t_eval) -> PairScores:
    """Score every pair in the catalog under arc times ``t_eval``."""
    reqs = catalog.requests
    nodes = sorted({r.origin for r in reqs} | {r.destination for r in reqs})
    T = all_pairs_times(network, t_eval, sources=nodes)
    cost = column_costs(catalog, T)
    o = np.array([r.origin for r in reqs], dtype=np.int64)
    d = np.array([r.destination for r in reqs], dtype=np.int64)
    direct = T[o, d]
    K = len(catalog)
    # columns are sorted by (m, n, c): pick the cheapest per pair, lowest c on ties
    order = np.lexsort((catalog.c, cost, catalog.n, catalog.m))
    mm, nn = catalog.m[order], catalog.n[order]
    first = np.ones(K, dtype=bool)
    first[1:] = (mm[1:] != mm[:-1]) | (nn[1:] != nn[:-1])
    best = order[first]
    m, n = catalog.m[best], catalog.n[best]
    pooled = cost[best]
    unpooled = np.where(m == n, 2.0 * direct[m], direct[m] + direct[n])
    return PairScores(m, n, unpooled - pooled, best, pooled, unpooled)


def pair_improvement(catalog: ConfigCatalog, network: Network, t_eval, m: int, n: int) -> float:
    """Unit improvement of pooling ``m`` with ``n`` at their best feasible configuration."""
    m, n = min(m, n), max(m, n)
    if m != n and not catalog.feasible(m, n):
        raise KeyError(f"pair ({m}, {n}) has no feasible configuration")
    scores = score_pairs(catalog, network, t_eval)
    k = np.flatnonzero((scores.m == m) & (scores.n == n))[0]
    return float(scores.delta[k])


@dataclass
class GreedyResult:
    beta: np.ndarray
    gamma: np.ndarray
    residual: np.ndarray
    iterations: int
    order: list = field(default_factory=list)

    def improvement(self, pairs, delta) -> float:
        return float(sum(self.gamma[m, n] * d for (m, n), d in zip(pairs, delta)))


def greedy_allocate(alpha, pairs, delta, same_od, t_bar: float) -> GreedyResult:
    """Greedy allocation over scored pairs.

    ``pairs`` are ``(m, n)`` with ``m <= n``; ``same_od[k]`` marks pairs whose
    requests share origin and destination (for distinct-OD request sets this
    is exactly ``m == n``). The working score matrix is only ever zeroed, so
    visiting positive pairs in decreasing score order (ties lexicographic)
    reproduces the argmax loop exactly.
    """
    alpha = np.asarray(alpha, dtype=float)
    M = len(alpha)
    beta = np.zeros((M, M))
    gamma = np.zeros((M, M))
    a = alpha.copy()
    ranked = sorted((k for k in range(len(pairs)) if delta[k] > 0),
                    key=lambda k: (-delta[k], pairs[k][0], pairs[k][1]))
    for k in ranked:
        m, n = pairs[k]
        if same_od[k]:
            beta[m, n] = a[m]
            beta[n, m] = beta[m, n]
            g = beta[m, n] * pool_probability(beta[m, n], beta[n, m], t_bar) / 2.0
        else:
            beta[n, m] = a[n]
            beta[m, n] = a[m]
            g = min(beta[n, m], beta[m, n]) * pool_probability(beta[m, n], beta[n, m], t_bar)
        gamma[m, n] = gamma[n, m] = g
        a[m] -= gamma[m, n]
        a[n] -= gamma[n, m]
        a[m] = max(a[m], 0.0)
        a[n] = max(a[n], 0.0)
    return GreedyResult(beta, gamma, a, len(ranked), [pairs[k] for k in ranked])


def greedy_assign(catalog: ConfigCatalog, network: Network, t_eval, t_bar: float):
    """Score pairs under ``t_eval`` and run the greedy allocation.

    Returns ``(result, scores)``; ``result.gamma[m, n]`` is the pooled
    vehicle rate of the pair at its best configuration ``scores.best``.
    """
    scores = score_pairs(catalog, network, t_eval)
    reqs = catalog.requests
    pairs = list(zip(scores.m.tolist(), scores.n.tolist()))
    same = [reqs[m].od == reqs[n].od for m, n in pairs]
    alpha = [r.rate for r in reqs]
    return greedy_allocate(alpha, pairs, scores.delta.tolist(), same, t_bar), scores


def served_users(gamma) -> np.ndarray:
    """Users of each request carried in pooled vehicles (self-pools count twice)."""
    g = np.asarray(gamma, dtype=float)
    return g.sum(axis=1) + np.diag(g)


def column_rates(catalog: ConfigCatalog, gamma, best) -> np.ndarray:
    """Map a pair-level ``gamma`` matrix onto catalog column rates."""
    rates = np.zeros(len(catalog))
    for k in best:
        rates[k] = gamma[catalog.m[k], catalog.n[k]]
    return rates


def assemble_drp_with_leftovers(D, requests, gamma, catalog: ConfigCatalog, best) -> np.ndarray:
    """Pooled vehicle demand plus the demand that was not pooled.

    ``D`` is the demand matrix of ``requests`` (the catalog's request list),
    ``best`` the catalog column chosen for each scored pair.
    """
    n_nodes = D.shape[0]
    users = served_users(gamma)
    alpha = np.array([r.rate for r in requests])
    left = alpha - users
    if np.any(left < -1e-9 * np.maximum(1.0, alpha)):
        bad = int(np.argmin(left))
        raise ValueError(f"pooled demand exceeds request {bad} rate")
    out = np.array(D, dtype=float, copy=True)
    for m, r in enumerate(requests):
        if users[m]:
            out[r.destination, r.origin] -= users[m]
            out[r.origin, r.origin] += users[m]
    for k in best:
        g = gamma[catalog.m[k], catalog.n[k]]
        if g > 0:
            out += g * leg_matrix(catalog.legs(k), n_nodes)
    return out


@dataclass
class FixedPointResult:
    D_rp: np.ndarray
    solution: FlowSolution
    greedy: GreedyResult
    scores: PairScores
    gamma_columns: np.ndarray
    trace: list
    iterations: int
    converged: bool


def fixed_point_assignment(network: Network, catalog: ConfigCatalog, pwl: PwlTravelTime,
                           t_bar: float, rho: float = 1.0, x_p=None, D_fixed=None, law: str = "bpr",
                           max_iter: int = 10, tol: float = 1e-2, router: RoutingSolver | None = None,
                           t_start=None) -> FixedPointResult:
    """Alternate greedy assignment under current times and congestion-aware routing.

    Iteration 1 scores pairs at free flow (or ``t_start``); later iterations
    use the times ``law`` gives for the previous flows. Stops when the routing
    objective changes by at most ``tol`` relatively, or after ``max_iter``.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    reqs = catalog.requests
    n = network.n_nodes
    x_p = np.zeros(network.n_arcs) if x_p is None else np.asarray(x_p, dtype=float)
    D_fixed = np.zeros((n, n)) if D_fixed is None else D_fixed
    D_pool = build_demand_matrix(reqs, n)
    router = router or RoutingSolver(network, pwl, rho)
    t_eval = network.t0.copy() if t_start is None else np.asarray(t_start, dtype=float)
    trace = []
    prev = None
    converged = False
    for it in range(1, max_iter + 1):
        greedy, scores = greedy_assign(catalog, network, t_eval, t_bar)
        D_rp = assemble_drp_with_leftovers(D_pool, reqs, greedy.gamma, catalog, scores.best)
        sol = router(D_rp + D_fixed, x_p)
        trace.append(sol.J)
        change = math.inf if prev is None else abs(sol.J - prev) / max(abs(sol.J), 1e-12)
        log.debug("fixed point %d: J=%.6g change=%.3g", it, sol.J, change)
        if change <= tol:
            converged = True
            break
        prev = sol.J
        t_eval = arc_times(network, sol.total_flow, law, pwl)
    gcols = column_rates(catalog, greedy.gamma, scores.best)
    sol.diagnostics["fixed_point_trace"] = list(trace)
    return FixedPointResult(D_rp, sol, greedy, scores, gcols, trace, it, converged)
