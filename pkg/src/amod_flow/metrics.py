"""Per-class experienced travel times and link congestion summaries.

Times are recomputed under one realized travel-time vector. An AMoD leg
``(o, j)`` takes the flow-weighted mean time of the paths obtained by
decomposing origin ``o``'s flow; a pooled user adds up the legs of their own
visit sequence. Waiting time for a match is not included.
"""

from __future__ import annotations

import numpy as np

from .congestion import link_congestion
from .network import Network, shortest_paths
from .pooling import ConfigCatalog
from .tap import decompose_paths

MINUTES_PER_HOUR = 60.0


class LegTimes(dict):
    """Leg ``(o, j)`` -> time [h]; legs not carried by the flows get the shortest-path time."""

    def __init__(self, network: Network, t):
        super().__init__()
        self.network, self.t = network, t
        self._dist = {}

    def shortest(self, o, j) -> float:
        if o not in self._dist:
            self._dist[o] = shortest_paths(self.network, self.t, o)[0]
        return float(self._dist[o][j])

    def __missing__(self, key):
        return self.shortest(*key)


def leg_times(network: Network, X, D, t) -> LegTimes:
    """Mean realized time [h] of every positive leg ``(o, j)`` of ``D``.

    Legs whose flow cannot be recovered from ``X`` (numerical dust) fall back
    to the shortest-path time under ``t``.
    """
    X = np.maximum(np.asarray(X, dtype=float), 0.0)
    t = np.asarray(t, dtype=float)
    out = LegTimes(network, t)
    for o in range(network.n_nodes):
        sinks = {int(j): float(D[j, o]) for j in np.flatnonzero(D[:, o] > 0) if j != o}
        if not sinks:
            continue
        acc = {j: [0.0, 0.0] for j in sinks}
        for j, _, q, c in decompose_paths(network, X[:, o], o, sinks, t):
            acc[j][0] += q * c
            acc[j][1] += q
        for j, (qc, q) in acc.items():
            out[(o, j)] = qc / q if q >= 0.5 * sinks[j] else out.shortest(o, j)
    return out


def _leg(times, o, d):
    return 0.0 if o == d else times[(o, d)]


def individual_avg_time(requests, times) -> float:
    """Demand-weighted mean time [h] of requests served alone; nan if none."""
    w = sum(r.rate for r in requests)
    if w <= 0:
        return float("nan")
    return sum(r.rate * _leg(times, r.origin, r.destination) for r in requests) / w


def pooled_user_times(catalog: ConfigCatalog, gamma, times):
    """Per-request ``(users, user-hours)`` of the pooled class.

    ``gamma`` holds one vehicle rate per catalog column. Users left unmatched
    by the assignment travel alone on their own leg.
    """
    reqs = catalog.requests
    M = len(reqs)
    users = np.zeros(M)
    hours = np.zeros(M)
    gamma = np.zeros(len(catalog)) if gamma is None else np.asarray(gamma, dtype=float)
    for k in np.flatnonzero(gamma > 0):
        g = gamma[k]
        cfg = catalog.config(k)
        m, n = int(catalog.m[k]), int(catalog.n[k])
        if cfg.self_pool:
            r = reqs[m]
            users[m] += 2.0 * g
            hours[m] += 2.0 * g * _leg(times, r.origin, r.destination)
            continue
        for member, idx in ((0, m), (1, n)):
            tm = sum(_leg(times, a, b) for a, b in cfg.member_legs(member))
            users[idx] += g
            hours[idx] += g * tm
    for m, r in enumerate(reqs):
        left = r.rate - users[m]
        if left > 0.0:
            users[m] += left
            hours[m] += left * _leg(times, r.origin, r.destination)
    return users, hours


def pooled_avg_time(catalog: ConfigCatalog, gamma, times) -> float:
    users, hours = pooled_user_times(catalog, gamma, times)
    total = users.sum()
    return float(hours.sum() / total) if total > 0 else float("nan")


def private_avg_time(t, x_p, requests) -> float:
    w = sum(r.rate for r in requests)
    return float(np.dot(t, x_p) / w) if w > 0 else float("nan")


def per_class_avg_time(network: Network, X, D_rp, t, individual=(), catalog: ConfigCatalog | None = None,
                       gamma=None) -> dict:
    """Mean experienced time [min] of the individual and pooled AMoD classes."""
    times = leg_times(network, X, D_rp, t)
    out = {"individual": individual_avg_time(list(individual), times) * MINUTES_PER_HOUR}
    if catalog is not None and len(catalog.requests):
        out["pooled"] = pooled_avg_time(catalog, gamma, times) * MINUTES_PER_HOUR
    else:
        out["pooled"] = float("nan")
    return out


def sigma_summary(total_flow, capacity) -> dict:
    s = link_congestion(total_flow, capacity)
    return {"sigma_max": float(s.max(initial=0.0)), "sigma_mean": float(s.mean()) if s.size else 0.0,
            "sigma_count": int(np.count_nonzero(s > 0))}
