"""Travel-time laws: BPR, its two-line relaxation, link congestion and the flow cost."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network


@dataclass(frozen=True)
class BprParams:
    alpha: float = 0.15
    beta: float = 4.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("BPR alpha must be positive")
        if not self.beta >= 1:
            raise ValueError("BPR beta must be >= 1")


def bpr_time(t0, capacity, params: BprParams | None, total_flow):
    """``t0 * (1 + alpha * (flow / capacity) ** beta)``; vectorised."""
    p = params or BprParams()
    return np.asarray(t0) * (1.0 + p.alpha * (np.asarray(total_flow) / np.asarray(capacity)) ** p.beta)


def _bpr(t0, kappa, alpha, beta, f):
    return t0 * (1.0 + alpha * (f / kappa) ** beta)


@dataclass(frozen=True)
class PwlTravelTime:
    """Per-arc convex envelope ``t(f) = max_k(slopes[:, k] * f + intercepts[:, k])``.

    Row ``a`` belongs to arc ``a``; ``breakpoints[a]`` is the flow where the
    active segment switches.
    """

    slopes: np.ndarray
    intercepts: np.ndarray
    breakpoints: np.ndarray
    theta: float = 1.0

    def __call__(self, total_flow):
        f = np.asarray(total_flow, dtype=float)
        return np.max(self.slopes * f[:, None] + self.intercepts, axis=1)

    def integral(self, lo, hi):
        """Per-arc integral of the envelope over ``[lo, hi]`` (elementwise, lo <= hi)."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        bp = self.breakpoints
        s, b = self.slopes, self.intercepts

        def prim(x, k):
            return 0.5 * s[:, k] * x * x + b[:, k] * x

        a1 = np.minimum(hi, np.maximum(lo, bp))
        # segment 0 on [lo, min(hi, bp)], segment 1 on [max(lo, bp), hi]
        seg0 = prim(np.minimum(hi, bp), 0) - prim(np.minimum(lo, bp), 0)
        seg1 = prim(hi, 1) - prim(a1, 1)
        seg0 = np.where(lo < bp, seg0, 0.0)
        seg1 = np.where(hi > bp, seg1, 0.0)
        return seg0 + seg1

    def to_dict(self) -> dict:
        return {"theta": self.theta, "slopes": self.slopes.tolist(),
                "intercepts": self.intercepts.tolist(), "breakpoints": self.breakpoints.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PwlTravelTime":
        return cls(np.array(d["slopes"]), np.array(d["intercepts"]), np.array(d["breakpoints"]),
                   float(d.get("theta", 1.0)))


def fit_two_line(t0, capacity, params: BprParams | None = None, theta: float = 1.0):
    """Secant segments of the BPR curve on ``[0, theta*k]`` and ``[theta*k, 2*theta*k]``.

    Returns ``((slope0, intercept0), (slope1, intercept1))``; the first
    segment is anchored at ``(0, t0)``.
    """
    if not theta > 0:
        raise ValueError("breakpoint fraction theta must be positive")
    p = params or BprParams()
    x1 = theta * capacity
    y1 = _bpr(t0, capacity, p.alpha, p.beta, x1)
    y2 = _bpr(t0, capacity, p.alpha, p.beta, 2.0 * x1)
    s0 = (y1 - t0) / x1
    s1 = (y2 - y1) / x1
    return (s0, t0), (s1, y1 - s1 * x1)


def fit_network_pwl(network: Network, theta: float = 1.0) -> PwlTravelTime:
    """Two-line relaxation for every arc, using each arc's own BPR constants."""
    slopes = np.empty((network.n_arcs, 2))
    intercepts = np.empty((network.n_arcs, 2))
    for a in range(network.n_arcs):
        p = BprParams(network.bpr_alpha[a], network.bpr_beta[a])
        (s0, b0), (s1, b1) = fit_two_line(network.t0[a], network.capacity[a], p, theta)
        slopes[a] = s0, s1
        intercepts[a] = b0, b1
    return PwlTravelTime(slopes, intercepts, theta * network.capacity, theta)


def pwl_fit_error(t0, capacity, params=None, theta=1.0, upper=2.0, n=20001) -> float:
    """Max relative error of the two-line envelope vs BPR on ``[0, upper*capacity]``."""
    p = params or BprParams()
    (s0, b0), (s1, b1) = fit_two_line(t0, capacity, p, theta)
    f = np.linspace(0.0, upper * capacity, n)
    approx = np.maximum(s0 * f + b0, s1 * f + b1)
    exact = _bpr(t0, capacity, p.alpha, p.beta, f)
    return float(np.max(np.abs(approx - exact) / exact))


def total_arc_flow(X, x_r=None, x_p=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    f = X.sum(axis=1) if X.ndim == 2 else X.copy()
    if x_r is not None:
        f = f + np.asarray(x_r, dtype=float)
    if x_p is not None:
        f = f + np.asarray(x_p, dtype=float)
    return f


def travel_time_vector(network: Network, X, x_r=None, x_p=None, law="bpr", pwl=None):
    """Per-arc travel time [h] at total flow ``X 1 + x_r + x_p``.

    ``law`` is ``"bpr"`` or ``"pwl"``; the PWL law needs ``pwl``.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] != network.n_arcs:
        raise ValueError("flow matrix rows must match the arc count")
    for v in (x_r, x_p):
        if v is not None and np.shape(v) != (network.n_arcs,):
            raise ValueError("flow vector length must match the arc count")
    f = total_arc_flow(X, x_r, x_p)
    if law == "bpr":
        return _bpr(network.t0, network.capacity, network.bpr_alpha, network.bpr_beta, f)
    if law == "pwl":
        if pwl is None:
            raise ValueError("pwl law requires fitted PwlTravelTime")
        return pwl(f)
    raise ValueError(f"unknown law {law!r}")


def arc_times(network: Network, total_flow, law="bpr", pwl=None):
    """Travel times for an already-summed arc flow vector."""
    f = np.asarray(total_flow, dtype=float)
    if law == "bpr":
        return _bpr(network.t0, network.capacity, network.bpr_alpha, network.bpr_beta, f)
    return pwl(f)


def link_congestion(flow, capacity):
    """Fractional excess of flow over capacity; zero for links under capacity."""
    flow = np.asarray(flow, dtype=float)
    return np.maximum(0.0, flow - capacity) / capacity


def objective(t, X, x_r, rho: float = 1.0) -> float:
    """``t^T (X 1 + rho x_r)`` in vehicle-hours per hour."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    X = np.asarray(X, dtype=float)
    served = X.sum(axis=1) if X.ndim == 2 else X
    return float(np.dot(t, served + rho * np.asarray(x_r, dtype=float)))
