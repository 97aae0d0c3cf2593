"""Private-vehicle user equilibrium and the operator/private bi-level loop."""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .congestion import PwlTravelTime, arc_times
from .network import Network, path_arcs, shortest_paths

log = logging.getLogger(__name__)


def all_or_nothing(network: Network, t, requests, per_request: bool = False):
    """Load every request's rate on its shortest path under ``t``.

    Returns ``(flows, min_times)``. ``flows`` is the summed arc flow, or with
    ``per_request=True`` an arcs x requests matrix with one column per
    request. ``min_times`` lists the shortest OD time per request.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("travel times must be positive")
    A = network.n_arcs
    Y = np.zeros((A, len(requests)))
    min_times = np.empty(len(requests))
    tail = network.tail
    groups: dict[int, list] = {}
    for k, r in enumerate(requests):
        groups.setdefault(r.origin, []).append(k)
    for o, ks in groups.items():
        dist, pred = shortest_paths(network, t, o)
        for k in ks:
            v = requests[k].destination
            if not np.isfinite(dist[v]):
                raise ValueError(f"destination {v} unreachable from {o}")
            min_times[k] = dist[v]
            while pred[v] >= 0:
                Y[pred[v], k] = requests[k].rate
                v = tail[pred[v]]
    return (Y if per_request else Y.sum(axis=1)), min_times


def beckmann(network: Network, x, background=None, law: str = "bpr", pwl: PwlTravelTime | None = None) -> float:
    """Sum over arcs of the travel-time integral from background to background + x."""
    b = np.zeros(network.n_arcs) if background is None else np.asarray(background, dtype=float)
    x = np.asarray(x, dtype=float)
    if law == "pwl":
        return float(np.sum(pwl.integral(b, b + x)))
    t0, k, al, be = network.t0, network.capacity, network.bpr_alpha, network.bpr_beta

    def prim(f):
        return t0 * (f + al * k / (be + 1.0) * (f / k) ** (be + 1.0))

    return float(np.sum(prim(b + x) - prim(b)))


@dataclass
class EquilibriumReport:
    """Private flows at equilibrium.

    ``iterations`` counts shortest-path sweeps including the initial
    all-or-nothing load; ``min_times`` [h] is per request.
    """

    x_p: np.ndarray
    per_request: np.ndarray  # arcs x requests
    relative_gap: float
    iterations: int
    min_times: np.ndarray
    converged: bool
    potential_trace: list = field(default_factory=list)
    gap_trace: list = field(default_factory=list)

    @property
    def total_time(self) -> float:
        return float(self._t @ self.x_p) if hasattr(self, "_t") else math.nan


def _line_search(network, background, x, d, law, pwl, iters=60):
    """Exact step on the Beckmann potential by bisection on its derivative."""
    def slope(lam):
        return float(arc_times(network, background + x + lam * d, law, pwl) @ d)

    if slope(1.0) <= 0.0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _time_derivative(network, f, law, pwl):
    if law == "bpr":
        k, al, be = network.capacity, network.bpr_alpha, network.bpr_beta
        return network.t0 * al * be * np.power(f / k, be - 1.0) / k
    lines = pwl.slopes * f[:, None] + pwl.intercepts
    return pwl.slopes[np.arange(len(f)), np.argmax(lines, axis=1)]


def _conjugate_weight(H, d_prev, d_fw, delta=1e-2):
    """Weight of the previous conjugate point (``H``-conjugacy of directions)."""
    num = float(d_prev @ (H * d_fw))
    den = float(d_prev @ (H * (d_fw - d_prev)))
    if den == 0.0:
        return 0.0
    a = num / den
    if a > 1.0 - delta:
        return 1.0 - delta
    return a if a >= 0.0 else 0.0


def solve_ue(network: Network, requests, background=None, law: str = "bpr",
             pwl: PwlTravelTime | None = None, gap_tol: float = 1e-4, max_iter: int = 500,
             method: str = "pfw") -> EquilibriumReport:
    """Frank-Wolfe user equilibrium of ``requests`` over fixed ``background`` flows.

    ``method`` picks the step:

    - ``"fw"``: toward the all-or-nothing point;
    - ``"cfw"``: toward a conjugate combination of it and the previous target;
    - ``"pfw"`` (default): pairwise steps per OD, moving flow from its most
      expensive used path to the current shortest one. Paths loaded early
      can then be emptied, which plain steps only shrink geometrically.

    Every step is an exact bisection line search on the Beckmann potential.
    One iteration is one shortest-path sweep over all origins. The relative
    gap is ``(t^T x - sum rate * min OD time) / t^T x``.
    """
    if not gap_tol > 0:
        raise ValueError("gap_tol must be positive")
    if method not in ("fw", "cfw", "pfw"):
        raise ValueError(f"unknown method {method!r}")
    A = network.n_arcs
    b = np.zeros(A) if background is None else np.asarray(background, dtype=float)
    requests = list(requests)
    if not requests:
        return EquilibriumReport(np.zeros(A), np.zeros((A, 0)), 0.0, 0,
                                 np.zeros(0), True)
    if method == "pfw":
        return _pairwise_fw(network, requests, b, law, pwl, gap_tol, max_iter)
    rates = np.array([r.rate for r in requests])
    Y, _ = all_or_nothing(network, arc_times(network, b, law, pwl), requests, per_request=True)
    pot, gaps = [], []
    S_prev = None
    it = 0
    converged = False
    while True:
        x = Y.sum(axis=1)
        t = arc_times(network, b + x, law, pwl)
        S, min_times = all_or_nothing(network, t, requests, per_request=True)
        tx = float(t @ x)
        gap = max(0.0, (tx - float(rates @ min_times)) / tx) if tx > 0 else 0.0
        gaps.append(gap)
        pot.append(beckmann(network, x, b, law, pwl))
        if gap <= gap_tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        if method == "cfw" and S_prev is not None:
            H = _time_derivative(network, b + x, law, pwl)
            a = _conjugate_weight(H, S_prev.sum(axis=1) - x, S.sum(axis=1) - x)
            S = a * S_prev + (1.0 - a) * S
        D = S - Y
        lam = _line_search(network, b, x, D.sum(axis=1), law, pwl)
        Y = Y + lam * D
        S_prev = S
    rep = EquilibriumReport(Y.sum(axis=1), Y, gap, it + 1, min_times, converged, pot, gaps)
    rep._t = t
    return rep


def _pair_step(network, b, x, plus, minus, cap, law, pwl, iters=50):
    """Exact step moving flow from arcs ``minus`` to arcs ``plus``, at most ``cap``."""
    def slope(d):
        f = b + x
        f[plus] += d
        f[minus] -= d
        tt = arc_times(network, f, law, pwl)
        return float(tt[plus].sum() - tt[minus].sum())

    if slope(0.0) >= 0.0:
        return 0.0
    if slope(cap) <= 0.0:
        return cap
    lo, hi = 0.0, cap
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return lo


def _pairwise_fw(network, requests, b, law, pwl, gap_tol, max_iter, flow_eps=1e-6):
    A = network.n_arcs
    rates = np.array([r.rate for r in requests])
    groups: dict[int, list] = {}
    for k, r in enumerate(requests):
        groups.setdefault(r.origin, []).append(k)
    t = arc_times(network, b, law, pwl)
    paths: list[dict] = [dict() for _ in requests]
    x = np.zeros(A)
    for o, ks in groups.items():
        _, pred = shortest_paths(network, t, o)
        for k in ks:
            p = tuple(path_arcs(network, pred, requests[k].destination))
            paths[k][p] = rates[k]
            x[list(p)] += rates[k]
    pot, gaps = [], []
    it = 0
    converged = False
    while True:
        t = arc_times(network, b + x, law, pwl)
        _, min_times = all_or_nothing(network, t, requests)
        tx = float(t @ x)
        gap = max(0.0, (tx - float(rates @ min_times)) / tx) if tx > 0 else 0.0
        gaps.append(gap)
        pot.append(beckmann(network, x, b, law, pwl))
        # stop once the gap is met and no used path is more than
        # 10 * gap_tol slower than its OD minimum
        worst = max((float(t[list(p)].sum()) / min_times[k]
                     for k, used in enumerate(paths) for p, f in used.items() if f > flow_eps),
                    default=1.0)
        if (gap <= gap_tol and worst <= 1.0 + 10.0 * gap_tol) or it >= max_iter:
            converged = gap <= gap_tol
            break
        it += 1
        for o, ks in groups.items():
            t = arc_times(network, b + x, law, pwl)
            _, pred = shortest_paths(network, t, o)
            for k in ks:
                best = tuple(path_arcs(network, pred, requests[k].destination))
                used = paths[k]
                used.setdefault(best, 0.0)
                bset = set(best)
                cost = {p: float(t[list(p)].sum()) for p in used}
                for p in sorted(used, key=lambda q: -cost[q]):
                    if p == best or used[p] <= 0.0 or cost[p] <= cost[best]:
                        continue
                    pset = set(p)
                    plus = np.array(sorted(bset - pset), dtype=np.int64)
                    minus = np.array(sorted(pset - bset), dtype=np.int64)
                    d = _pair_step(network, b, x, plus, minus, used[p], law, pwl)
                    if d <= 0.0:
                        continue
                    x[plus] += d
                    x[minus] -= d
                    used[best] += d
                    used[p] = used[p] - d if d < used[p] else 0.0
                    t = arc_times(network, b + x, law, pwl)
                for p in [p for p, f in used.items() if f <= 0.0]:
                    del used[p]
        np.maximum(x, 0.0, out=x)
    Y = np.zeros((A, len(requests)))
    for k, used in enumerate(paths):
        for p, f in used.items():
            Y[list(p), k] += f
    rep = EquilibriumReport(Y.sum(axis=1), Y, gap, it + 1, min_times, converged, pot, gaps)
    rep._t = arc_times(network, b + rep.x_p, law, pwl)
    return rep


def decompose_paths(network: Network, flow, origin: int, sinks: dict, t, tol: float = 1e-12):
    """Split one origin's arc flow into paths by successive shortest paths.

    ``sinks`` maps destination to rate. Returns a list of
    ``(destination, arcs, flow, cost)``.
    """
    rem = np.array(flow, dtype=float, copy=True)
    scale = max(1.0, float(np.max(rem, initial=0.0)))
    out = []
    need = dict(sinks)
    while need:
        active = rem > tol * scale
        cost = np.where(active, t, np.inf)
        dist, pred = _masked_sp(network, cost, origin)
        progressed = False
        for d in sorted(need):
            q = need[d]
            if q <= tol * scale or not np.isfinite(dist[d]):
                continue
            arcs = path_arcs(network, pred, d)
            amount = min(q, float(np.min(rem[arcs]))) if arcs else q
            rem[arcs] -= amount
            need[d] = q - amount
            out.append((d, arcs, amount, float(np.sum(t[arcs]))))
            progressed = True
            break
        need = {d: q for d, q in need.items() if q > tol * scale}
        if not progressed:
            break
    return out


def _masked_sp(network, cost, origin):
    # Dijkstra over the arcs with finite cost only
    n = network.n_nodes
    dist = [math.inf] * n
    pred = [-1] * n
    done = [False] * n
    dist[origin] = 0.0
    heap = [(0.0, origin)]
    head = network.head
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for a in network.out_arcs(u):
            if not np.isfinite(cost[a]):
                continue
            v = int(head[a])
            nd = d + cost[a]
            if nd < dist[v] or (nd == dist[v] and not done[v] and a < pred[v]):
                dist[v] = nd
                pred[v] = a
                heapq.heappush(heap, (nd, v))
    return np.array(dist), np.array(pred)


def wardrop_check(network: Network, report: EquilibriumReport, requests, t=None,
                  flow_eps: float = 1e-6, rel_tol: float = 1e-3):
    """Every decomposed path carrying more than ``flow_eps`` costs at most
    ``min_time * (1 + rel_tol)``. Returns ``(ok, worst_ratio)``."""
    t = report._t if t is None else np.asarray(t, dtype=float)
    worst = 1.0
    dists = {}
    for k, r in enumerate(requests):
        if r.origin not in dists:
            dists[r.origin] = shortest_paths(network, t, r.origin)[0]
        best = dists[r.origin][r.destination]
        paths = decompose_paths(network, report.per_request[:, k], r.origin,
                                {r.destination: r.rate}, t)
        for _, _, q, c in paths:
            if q > flow_eps:
                worst = max(worst, c / best)
    return worst <= 1.0 + rel_tol, worst


# ---------------------------------------------------------------------------
# Bi-level coordination
# ---------------------------------------------------------------------------

@dataclass
class BilevelResult:
    solution: object
    equilibrium: EquilibriumReport
    trace: list
    combined_trace: list
    rounds: int
    converged: bool
    operator_info: object = None


def bilevel_solve(network: Network, private, operator, tol_obj: float = 1e-2, max_rounds: int = 10,
                  has_amod: bool = True, ue_law: str = "bpr", pwl: PwlTravelTime | None = None,
                  gap_tol: float = 1e-4, ue_max_iter: int = 500, ue_method: str = "pfw") -> BilevelResult:
    """Alternate the operator program and the private equilibrium.

    ``operator(x_p)`` must return ``(FlowSolution, info)``. Private flows
    start as the free-flow all-or-nothing load. Stops when the operator
    objective varies by at most ``tol_obj`` relatively between rounds.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    private = list(private)
    A = network.n_arcs
    if private:
        x_p = all_or_nothing(network, network.t0, private)[0]
    else:
        x_p = np.zeros(A)
    trace, combined = [], []
    sol = info = eq = None
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        if has_amod:
            sol, info = operator(x_p)
            bg = sol.X.sum(axis=1) + sol.x_r
            J = sol.J
        else:
            bg = np.zeros(A)
            J = 0.0
        eq = solve_ue(network, private, bg, ue_law, pwl, gap_tol, ue_max_iter, ue_method)
        t_final = arc_times(network, bg + eq.x_p, ue_law, pwl)
        trace.append(J)
        combined.append(J + float(t_final @ eq.x_p))
        x_p = eq.x_p
        log.info("bilevel round %d: operator J=%.6g combined=%.6g", rounds, J, combined[-1])
        if not private or not has_amod:
            converged = True
            break
        if rounds > 1:
            change = abs(trace[-1] - trace[-2]) / max(abs(trace[-1]), 1e-12)
            if change <= tol_obj:
                converged = True
                break
    if not converged:
        log.warning("bi-level loop stopped after %d rounds without meeting tolerance", rounds)
    return BilevelResult(sol, eq, trace, combined, rounds, converged, info)
