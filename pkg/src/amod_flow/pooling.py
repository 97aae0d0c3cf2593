"""Spatial and temporal pooling analysis for pairs of travel requests.

Two requests ``m`` and ``n`` can share a vehicle in four serving orders, each
visiting both origins before both destinations so the middle leg carries two
users. A request pooled with itself follows ``(o, o, d, d)``, which collapses
to the direct leg with two users aboard.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .demand import Request, leg_matrix
from .network import Network, all_pairs_times

# Visit orders as (kind, member) roles; kind is "o" or "d", member 0=m, 1=n.
CONFIG_ROLES = {
    1: (("o", 0), ("o", 1), ("d", 0), ("d", 1)),
    2: (("o", 0), ("o", 1), ("d", 1), ("d", 0)),
    3: (("o", 1), ("o", 0), ("d", 0), ("d", 1)),
    4: (("o", 1), ("o", 0), ("d", 1), ("d", 0)),
}
SELF_ROLES = (("o", 0), ("o", 0), ("d", 0), ("d", 0))
CONFIG_IDS = tuple(CONFIG_ROLES)

_FEAS_EPS = 1e-12


@dataclass(frozen=True)
class PoolConfig:
    """One serving order for a request pair; ``legs`` are the vehicle trips."""

    c: int
    sequence: tuple
    roles: tuple
    legs: tuple
    self_pool: bool = False

    @property
    def shared_leg(self) -> tuple:
        """The leg travelled with both users aboard."""
        return self.legs[0] if self.self_pool else self.legs[1]

    def member_legs(self, member: int) -> tuple:
        """Legs ridden by ``member`` (0 = m, 1 = n), from pickup to drop-off."""
        if self.self_pool:
            return self.legs
        start = self.roles.index(("o", member))
        stop = self.roles.index(("d", member))
        return self.legs[start:stop]


def _pair_nodes(r_m: Request, r_n: Request, roles):
    reqs = (r_m, r_n)
    return tuple(reqs[k].origin if kind == "o" else reqs[k].destination for kind, k in roles)


def enumerate_configs(r_m: Request, r_n: Request, self_pool: bool | None = None) -> list[PoolConfig]:
    """The four pooled serving orders of a pair, or the single self-pool order.

    ``self_pool`` defaults to ``r_m is r_n``.
    """
    if self_pool is None:
        self_pool = r_m is r_n
    if self_pool:
        seq = _pair_nodes(r_m, r_m, SELF_ROLES)
        return [PoolConfig(1, seq, SELF_ROLES, ((r_m.origin, r_m.destination),), True)]
    out = []
    for c, roles in CONFIG_ROLES.items():
        seq = _pair_nodes(r_m, r_n, roles)
        legs = tuple((seq[k], seq[k + 1]) for k in range(3))
        out.append(PoolConfig(c, seq, roles, legs))
    return out


def config_delay(network: Network, config: PoolConfig, member: int, times=None) -> float:
    """Free-flow detour of ``member`` (0 = m, 1 = n) in ``config`` [h].

    ``times`` may carry a precomputed all-pairs free-flow time matrix.
    """
    if config.self_pool:
        return 0.0
    T = all_pairs_times(network, network.t0) if times is None else times
    legs = config.member_legs(member)
    ride = sum(T[o, d] for o, d in legs)
    o = config.sequence[config.roles.index(("o", member))]
    d = config.sequence[config.roles.index(("d", member))]
    direct = T[o, d]
    if not np.isfinite(ride) or not np.isfinite(direct):
        raise ValueError(f"disconnected OD in configuration {config.sequence}")
    return float(ride - direct)


def feasible_set(network: Network, r_m: Request, r_n: Request, delta_bar: float,
                 self_pool: bool | None = None, times=None) -> list[int]:
    """Configuration ids whose detours stay within ``delta_bar`` for both users."""
    if delta_bar < 0:
        raise ValueError("delta_bar must be nonnegative")
    configs = enumerate_configs(r_m, r_n, self_pool)
    if configs[0].self_pool:
        return [1]
    T = all_pairs_times(network, network.t0) if times is None else times
    return [cfg.c for cfg in configs
            if config_delay(network, cfg, 0, T) <= delta_bar + _FEAS_EPS
            and config_delay(network, cfg, 1, T) <= delta_bar + _FEAS_EPS]


def config_demand_matrix(config: PoolConfig, n_nodes: int) -> np.ndarray:
    """Demand matrix of the configuration's legs at one vehicle per unit time."""
    return leg_matrix(config.legs, n_nodes)


def pool_probability(alpha_m, alpha_n, t_bar):
    """Probability that two Poisson arrival streams meet within ``t_bar``.

    Rates in 1/h, ``t_bar`` in hours. ``t_bar = inf`` gives 1, a zero rate gives 0.
    """
    am = np.asarray(alpha_m, dtype=float)
    an = np.asarray(alpha_n, dtype=float)
    if np.any(am < 0) or np.any(an < 0) or np.any(np.asarray(t_bar) < 0):
        raise ValueError("rates and t_bar must be nonnegative")
    tot = am + an
    with np.errstate(invalid="ignore", divide="ignore"):
        p = 1.0 - (am * np.exp(-an * t_bar) + an * np.exp(-am * t_bar)) / tot
    p = np.where((am > 0) & (an > 0), p, 0.0)
    p = np.clip(p, 0.0, 1.0)
    return float(p) if p.ndim == 0 else p


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

@dataclass
class ConfigCatalog:
    """Feasible pooling columns for a request set.

    Column ``k`` is the triple ``(m[k], n[k], c[k])`` with ``m <= n``;
    ``m == n`` marks a self-pool column. Only feasible columns are stored, and
    each request has exactly one self-pool column.
    """

    requests: list
    n_nodes: int
    delta_bar: float
    m: np.ndarray
    n: np.ndarray
    c: np.ndarray
    delay_m: np.ndarray
    delay_n: np.ndarray
    key: str = ""

    def __len__(self):
        return len(self.m)

    @property
    def is_self(self) -> np.ndarray:
        return self.m == self.n

    def feasible(self, m: int, n: int) -> list[int]:
        """``P_mn`` as a sorted list of configuration ids."""
        m, n = min(m, n), max(m, n)
        sel = (self.m == m) & (self.n == n)
        return sorted(self.c[sel].tolist())

    def pairs(self) -> list[tuple[int, int]]:
        seen = dict.fromkeys(zip(self.m.tolist(), self.n.tolist()))
        return list(seen)

    def config(self, k: int) -> PoolConfig:
        m, n, c = int(self.m[k]), int(self.n[k]), int(self.c[k])
        if m == n:
            return enumerate_configs(self.requests[m], self.requests[m], True)[0]
        return enumerate_configs(self.requests[m], self.requests[n], False)[c - 1]

    def legs(self, k: int) -> tuple:
        return self.config(k).legs

    def demand_matrix(self, k: int) -> np.ndarray:
        return config_demand_matrix(self.config(k), self.n_nodes)

    def leg_arrays(self):
        """Column-major leg table ``(column, origin, destination)`` skipping zero-length legs."""
        cols, os_, ds = [], [], []
        o = np.array([r.origin for r in self.requests])
        d = np.array([r.destination for r in self.requests])
        selfc = self.is_self
        ks = np.flatnonzero(selfc)
        cols.append(ks)
        os_.append(o[self.m[ks]])
        ds.append(d[self.m[ks]])
        for c, roles in CONFIG_ROLES.items():
            ks = np.flatnonzero(~selfc & (self.c == c))
            if ks.size == 0:
                continue
            nodes = [(o if kind == "o" else d)[(self.m if k == 0 else self.n)[ks]] for kind, k in roles]
            for j in range(3):
                cols.append(ks)
                os_.append(nodes[j])
                ds.append(nodes[j + 1])
        col = np.concatenate(cols)
        lo = np.concatenate(os_)
        ld = np.concatenate(ds)
        keep = lo != ld
        order = np.lexsort((np.arange(keep.sum()), col[keep]))
        return col[keep][order], lo[keep][order], ld[keep][order]

    def self_column(self) -> np.ndarray:
        """Index of each request's self-pool column."""
        out = np.full(len(self.requests), -1, dtype=np.int64)
        ks = np.flatnonzero(self.is_self)
        out[self.m[ks]] = ks
        return out

    # persistence ---------------------------------------------------------
    def save(self, path) -> None:
        meta = {"key": self.key, "n_nodes": self.n_nodes, "delta_bar": self.delta_bar,
                "requests": [[r.origin, r.destination, r.rate, r.cls] for r in self.requests]}
        np.savez_compressed(path, m=self.m, n=self.n, c=self.c, delay_m=self.delay_m,
                            delay_n=self.delay_n, meta=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path) -> "ConfigCatalog":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            return cls([Request(o, d, a, k) for o, d, a, k in meta["requests"]], meta["n_nodes"],
                       meta["delta_bar"], z["m"], z["n"], z["c"], z["delay_m"], z["delay_n"],
                       meta["key"])

    def summary(self) -> dict:
        pairs = ~self.is_self
        return {"requests": len(self.requests), "columns": len(self),
                "pair_columns": int(pairs.sum()),
                "pairs": int(len({(a, b) for a, b, s in zip(self.m.tolist(), self.n.tolist(), pairs) if s})),
                "delta_bar_h": self.delta_bar}


def catalog_key(network: Network, requests, delta_bar: float, min_pool_rate: float = 0.0) -> str:
    h = hashlib.sha256(network.fingerprint().encode())
    h.update(json.dumps([[r.origin, r.destination, r.rate] for r in requests]).encode())
    h.update(repr((float(delta_bar), float(min_pool_rate))).encode())
    return h.hexdigest()[:16]


def _config_delays(T, o, d, mi, ni, roles):
    """Vectorised free-flow detours of both members for one serving order."""
    idx = (mi, ni)
    nodes = [(o if kind == "o" else d)[idx[k]] for kind, k in roles]
    leg = [T[nodes[j], nodes[j + 1]] for j in range(3)]
    cum = np.concatenate([np.zeros((1, len(mi))), np.cumsum(leg, axis=0)])
    out = []
    for k in (0, 1):
        start = roles.index(("o", k))
        stop = roles.index(("d", k))
        out.append(cum[stop] - cum[start] - T[o[idx[k]], d[idx[k]]])
    return out


def precompute_catalog(network: Network, poolable, delta_bar: float, min_pool_rate: float = 0.0,
                       times=None) -> ConfigCatalog:
    """Screen every request pair in free-flow conditions.

    ``delta_bar`` is the detour threshold in hours. Requests with rate below
    ``min_pool_rate`` keep only their self-pool column.
    """
    if delta_bar < 0:
        raise ValueError("delta_bar must be nonnegative")
    requests = list(poolable)
    M = len(requests)
    T = all_pairs_times(network, network.t0) if times is None else times
    o = np.array([r.origin for r in requests], dtype=np.int64)
    d = np.array([r.destination for r in requests], dtype=np.int64)
    if M and not np.all(np.isfinite(T[o, d])):
        bad = int(np.flatnonzero(~np.isfinite(T[o, d]))[0])
        raise ValueError(f"request {bad} {requests[bad].od} is disconnected")
    cols_m, cols_n, cols_c, dm, dn = [np.arange(M)], [np.arange(M)], [np.ones(M, dtype=np.int64)], \
        [np.zeros(M)], [np.zeros(M)]
    eligible = np.array([r.rate >= min_pool_rate for r in requests], dtype=bool)
    mi, ni = np.triu_indices(M, k=1)
    keep = eligible[mi] & eligible[ni]
    mi, ni = mi[keep], ni[keep]
    for c, roles in CONFIG_ROLES.items():
        a, b = _config_delays(T, o, d, mi, ni, roles)
        ok = (a <= delta_bar + _FEAS_EPS) & (b <= delta_bar + _FEAS_EPS)
        cols_m.append(mi[ok])
        cols_n.append(ni[ok])
        cols_c.append(np.full(int(ok.sum()), c, dtype=np.int64))
        dm.append(np.maximum(a[ok], 0.0))
        dn.append(np.maximum(b[ok], 0.0))
    m_all = np.concatenate(cols_m)
    n_all = np.concatenate(cols_n)
    c_all = np.concatenate(cols_c)
    order = np.lexsort((c_all, n_all, m_all))
    return ConfigCatalog(requests, network.n_nodes, float(delta_bar), m_all[order], n_all[order],
                         c_all[order], np.concatenate(dm)[order], np.concatenate(dn)[order],
                         catalog_key(network, requests, delta_bar, min_pool_rate))


def load_or_build_catalog(cache_dir, network: Network, poolable, delta_bar: float,
                          min_pool_rate: float = 0.0) -> ConfigCatalog:
    key = catalog_key(network, poolable, delta_bar, min_pool_rate)
    path = Path(cache_dir) / f"catalog_{key}.npz"
    if path.exists():
        return ConfigCatalog.load(path)
    cat = precompute_catalog(network, poolable, delta_bar, min_pool_rate)
    path.parent.mkdir(parents=True, exist_ok=True)
    cat.save(path)
    return cat
