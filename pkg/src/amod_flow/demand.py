"""Travel requests, demand matrices and penetration-rate splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

PRIVATE = "private"
INDIVIDUAL = "amod_individual"
POOLABLE = "amod_poolable"
CLASSES = (PRIVATE, INDIVIDUAL, POOLABLE)

# Split copies below this rate (users/h) are dropped.
MIN_RATE = 1e-9


@dataclass(frozen=True)
class Request:
    """``rate`` users/hour travelling from ``origin`` to ``destination``."""

    origin: int
    destination: int
    rate: float
    cls: str = INDIVIDUAL

    def __post_init__(self):
        if self.origin == self.destination:
            raise ValueError(f"request origin equals destination ({self.origin})")
        if not self.rate > 0:
            raise ValueError(f"request rate must be positive, got {self.rate}")
        if self.cls not in CLASSES:
            raise ValueError(f"unknown request class {self.cls!r}")

    @property
    def od(self) -> tuple[int, int]:
        return (self.origin, self.destination)


def total_rate(requests) -> float:
    return float(sum(r.rate for r in requests))


def build_demand_matrix(requests, n_nodes: int) -> np.ndarray:
    """Demand matrix with ``D[d, o] = rate`` and diagonal balancing each column."""
    D = np.zeros((n_nodes, n_nodes))
    seen = set()
    for r in requests:
        if not (0 <= r.origin < n_nodes and 0 <= r.destination < n_nodes):
            raise ValueError(f"request {r.od} outside vertex range")
        if r.od in seen:
            raise ValueError(f"duplicate OD pair {r.od}")
        seen.add(r.od)
        D[r.destination, r.origin] = r.rate
    D[np.diag_indices(n_nodes)] = 0.0
    D[np.diag_indices(n_nodes)] = -D.sum(axis=0)
    return D


def leg_matrix(legs, n_nodes: int, rates=None) -> np.ndarray:
    """Demand matrix of a multiset of vehicle legs.

    Unlike :func:`build_demand_matrix`, repeated legs accumulate and
    zero-length legs contribute nothing.
    """
    D = np.zeros((n_nodes, n_nodes))
    rates = np.ones(len(legs)) if rates is None else rates
    for (o, d), w in zip(legs, rates):
        if o != d:
            D[d, o] += w
            D[o, o] -= w
    return D


def split_by_penetration(requests, phi: float, psi: float):
    """Scale each request into private, individual-AMoD and poolable-AMoD copies.

    Rates become ``(1-phi)a``, ``phi(1-psi)a`` and ``phi*psi*a``.
    """
    if not (0.0 <= phi <= 1.0 and 0.0 <= psi <= 1.0):
        raise ValueError("penetration rates must lie in [0, 1]")
    fractions = ((PRIVATE, 1.0 - phi), (INDIVIDUAL, phi * (1.0 - psi)), (POOLABLE, phi * psi))
    out = {cls: [] for cls in CLASSES}
    for r in requests:
        for cls, f in fractions:
            rate = r.rate * f
            if rate > MIN_RATE:
                out[cls].append(Request(r.origin, r.destination, rate, cls))
    return out[PRIVATE], out[INDIVIDUAL], out[POOLABLE]


def downsize(requests, factor: float):
    if not 0.0 < factor <= 1.0:
        raise ValueError("downsize factor must lie in (0, 1]")
    return [replace(r, rate=r.rate * factor) for r in requests]


def scale(requests, factor: float):
    """Multiply every rate by ``factor`` > 0 (demand scaling, not limited to 1)."""
    if not factor > 0:
        raise ValueError("scale factor must be positive")
    return [replace(r, rate=r.rate * factor) for r in requests]


def top_k(requests, k: int):
    """The ``k`` largest-rate requests, ties by OD, in original order."""
    keep = sorted(range(len(requests)), key=lambda i: (-requests[i].rate, requests[i].od))[:k]
    return [requests[i] for i in sorted(keep)]


def requests_to_json(requests) -> list[dict]:
    return [{"o": r.origin, "d": r.destination, "alpha": r.rate, "class": r.cls} for r in requests]


def requests_from_json(data) -> list[Request]:
    return [Request(int(e["o"]), int(e["d"]), float(e["alpha"]), e.get("class", INDIVIDUAL))
            for e in data]


def load_requests(path) -> list[Request]:
    return requests_from_json(json.loads(Path(path).read_text()))
