"""Joint pooling assignment and routing program, and routing as its special case.

Decision variables are the per-origin active flows ``X`` (arcs x vertices),
the rebalancing flow ``x_r`` and, for the joint program, one pooled vehicle
rate per catalog column. Travel times follow the two-line envelope, so for
``rho = 1`` the cost ``t(f)^T (f - x_p)`` is a maximum of convex quadratics
per arc and the program is a convex QCQP. It is handed to Clarabel through
cvxpy. For ``rho < 1`` the cost is no longer convex; a monotone Frank-Wolfe
descent from the ``rho = 1`` optimum is used instead.

Demand matrices put ``+rate`` at destinations and the incidence matrix puts
``+1`` on leaving arcs, so conservation is written ``-B X = D``: each
origin's column must show net inflow ``-rate`` at the origin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog, minimize_scalar

from .congestion import PwlTravelTime, total_arc_flow
from .network import Network, divergence, incidence, path_arcs, shortest_paths
from .pooling import ConfigCatalog

log = logging.getLogger(__name__)


class InfeasibleProgram(ValueError):
    pass


@dataclass
class FlowSolution:
    """Flows [veh/h], realised PWL times [h] and objective [veh-h/h]."""

    X: np.ndarray
    x_r: np.ndarray
    x_p: np.ndarray
    t: np.ndarray
    J: float
    D_rp: np.ndarray
    gamma: np.ndarray | None = None
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)

    @property
    def active_flow(self) -> np.ndarray:
        return self.X.sum(axis=1)

    @property
    def total_flow(self) -> np.ndarray:
        return self.X.sum(axis=1) + self.x_r + self.x_p


@dataclass
class ConvexProgram:
    """Assembled constraint data; vectors over origins use blocks of ``n_nodes`` rows.

    ``G`` maps catalog-column rates to the stacked demand columns
    ``vec(D_rp)[origins]`` and ``E`` maps them to per-request served users.
    """

    network: Network
    pwl: PwlTravelTime
    rho: float
    x_p: np.ndarray
    D_fixed: np.ndarray
    origins: np.ndarray
    catalog: ConfigCatalog | None = None
    alpha: np.ndarray | None = None
    G: sp.csr_matrix | None = None
    E: sp.csr_matrix | None = None

    @property
    def n_gamma(self) -> int:
        return 0 if self.catalog is None else len(self.catalog)

    def D_rp(self, gamma=None) -> np.ndarray:
        """Full demand matrix for the given column rates (fixed part included)."""
        D = self.D_fixed.copy()
        if self.catalog is not None and gamma is not None:
            n = self.network.n_nodes
            vec = self.G @ np.asarray(gamma, dtype=float)
            for b, o in enumerate(self.origins):
                D[:, o] += vec[b * n:(b + 1) * n]
        return D

    def residuals(self, sol: FlowSolution) -> dict:
        B = incidence(self.network)
        D = self.D_rp(sol.gamma)
        out = {"flow": float(np.max(np.abs(-(B @ sol.X) - D), initial=0.0)),
               "balance": float(np.max(np.abs(B @ (sol.X.sum(axis=1) + sol.x_r)), initial=0.0)),
               "min_flow": float(min(sol.X.min(initial=0.0), sol.x_r.min(initial=0.0)))}
        if self.catalog is not None:
            out["demand"] = float(np.max(np.abs(self.E @ sol.gamma - self.alpha), initial=0.0))
            out["min_gamma"] = float(sol.gamma.min(initial=0.0))
        return out


def _active_origins(D: np.ndarray, extra=()) -> np.ndarray:
    cols = set(np.flatnonzero(np.any(np.abs(D) > 0, axis=0)).tolist())
    cols.update(int(v) for v in extra)
    return np.array(sorted(cols), dtype=np.int64)


def assemble_routing(network: Network, D_rp, pwl: PwlTravelTime, rho: float = 1.0, x_p=None) -> ConvexProgram:
    D = np.asarray(D_rp, dtype=float)
    if np.max(np.abs(D.sum(axis=0)), initial=0.0) > 1e-9 * max(1.0, np.abs(D).max(initial=0.0)):
        raise ValueError("demand matrix columns must sum to zero")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    x_p = np.zeros(network.n_arcs) if x_p is None else np.asarray(x_p, dtype=float)
    return ConvexProgram(network, pwl, rho, x_p, D, _active_origins(D))


def assemble_joint(network: Network, catalog: ConfigCatalog, pwl: PwlTravelTime, rho: float = 1.0,
                   x_p=None, D_fixed=None) -> ConvexProgram:
    """Joint program over the catalog's columns.

    ``D_fixed`` holds demand that is routed but not pooled (individual AMoD
    requests). Each request must own a self-pool column, otherwise its demand
    equality cannot be met.
    """
    n = network.n_nodes
    D_fixed = np.zeros((n, n)) if D_fixed is None else np.asarray(D_fixed, dtype=float)
    x_p = np.zeros(network.n_arcs) if x_p is None else np.asarray(x_p, dtype=float)
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    M = len(catalog.requests)
    selfc = catalog.self_column()
    missing = np.flatnonzero(selfc < 0)
    if missing.size:
        raise InfeasibleProgram(f"request {int(missing[0])} has no self-pool column")
    col, lo, ld = catalog.leg_arrays()
    origins = _active_origins(D_fixed, np.unique(lo))
    block = np.full(n, -1, dtype=np.int64)
    block[origins] = np.arange(len(origins))
    rows = np.concatenate([block[lo] * n + ld, block[lo] * n + lo])
    vals = np.concatenate([np.ones(len(col)), -np.ones(len(col))])
    G = sp.csr_matrix((vals, (rows, np.concatenate([col, col]))), shape=(len(origins) * n, len(catalog)))
    K = len(catalog)
    is_self = catalog.is_self
    er = np.concatenate([catalog.m, catalog.n[~is_self]])
    ec = np.concatenate([np.arange(K), np.flatnonzero(~is_self)])
    ev = np.concatenate([np.where(is_self, 2.0, 1.0), np.ones(int((~is_self).sum()))])
    E = sp.csr_matrix((ev, (er, ec)), shape=(M, K))
    alpha = np.array([r.rate for r in catalog.requests], dtype=float)
    return ConvexProgram(network, pwl, rho, x_p, D_fixed, origins, catalog, alpha, G, E)


# ---------------------------------------------------------------------------
# cvxpy model
# ---------------------------------------------------------------------------

class _CvxModel:
    """Parametrised QCQP over a fixed origin set, reusable across right-hand sides."""

    def __init__(self, network: Network, pwl: PwlTravelTime, origins, G=None, E=None,
                 flow_scale=None):
        self.network = network
        self.origins = np.asarray(origins, dtype=np.int64)
        n, A, O = network.n_nodes, network.n_arcs, len(self.origins)
        # flows are measured in units of F; set per solve in _set
        self.F_cap = float(flow_scale or np.median(network.capacity))
        self.F = self.F_cap
        self.T = float(np.mean(network.t0))
        self.pwl = pwl
        B = incidence(network)
        keep = np.arange(n - 1)  # each block has one redundant row (columns sum to zero)
        Br = B[keep]
        NBr = -Br
        self.X = cp.Variable(A * O, nonneg=True) if O else None
        self.x_r = cp.Variable(A, nonneg=True)
        self.tau = cp.Variable(A)
        self.rhs = cp.Parameter(O * (n - 1)) if O else None
        self.xp = cp.Parameter(A, nonneg=True)
        self.coef = cp.Parameter((A, 2))  # b_k + s_k * x_p   (scaled)
        self.quad = cp.Parameter((A, 2), nonneg=True)  # s_k * F / T
        cons = []
        sub = np.concatenate([b * n + keep for b in range(O)]) if O else np.zeros(0, dtype=int)
        self.gamma = None
        if O:
            Bblk = sp.kron(sp.identity(O, format="csr"), NBr, format="csr")
            lhs = Bblk @ self.X
            if G is not None and G.shape[1]:
                self.gamma = cp.Variable(G.shape[1], nonneg=True)
                lhs = lhs - G[sub] @ self.gamma
                self.alpha = cp.Parameter(E.shape[0])
                cons.append(E @ self.gamma == self.alpha)
            cons.append(lhs == self.rhs)
            S = sp.kron(np.ones((1, O)), sp.identity(A), format="csr")
            active = S @ self.X
        else:
            active = cp.Constant(np.zeros(A))
        cons.append(Br @ (active + self.x_r) == 0)
        # with rho = 1 the cost of arc a is t_a(f0 + x_p) * f0, f0 = AMoD flow
        f0 = active + self.x_r
        for k in range(2):
            cons.append(self.tau >= cp.multiply(self.quad[:, k], cp.square(f0))
                        + cp.multiply(self.coef[:, k], f0))
        self.problem = cp.Problem(cp.Minimize(cp.sum(self.tau)), cons)
        self._sub = sub

    def _set(self, D_cols, x_p, alpha=None):
        # tiny demands on huge capacities would fall under the solver tolerances
        load = float(np.abs(D_cols).sum() / 2 if D_cols.size else 0.0)
        if alpha is not None:
            load += float(np.sum(alpha))
        self.F = max(1.0, min(self.F_cap, load))
        s = self.pwl.slopes * self.F / self.T
        b = self.pwl.intercepts / self.T
        self.quad.value = s
        if self.rhs is not None:
            self.rhs.value = (D_cols.T.reshape(-1) / self.F)[self._sub] if D_cols.size else np.zeros(0)
        xp = np.asarray(x_p, dtype=float) / self.F
        self.xp.value = xp
        self.coef.value = b + s * xp[:, None]
        if self.gamma is not None:
            self.alpha.value = np.asarray(alpha, dtype=float) / self.F

    def solve(self, D_cols, x_p, alpha=None, tol=1e-9):
        self._set(D_cols, x_p, alpha)
        try:
            self.problem.solve(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol,
                               tol_ktratio=1e-7, max_iter=400)
        except cp.SolverError:
            self.problem.solve(solver=cp.CLARABEL, max_iter=800)
        status = self.problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            raise InfeasibleProgram("flow program is infeasible (unreachable demand)")
        if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            raise RuntimeError("flow program reported unbounded; internal error")
        A, O = self.network.n_arcs, len(self.origins)
        X = np.zeros((A, self.network.n_nodes))
        if O:
            X[:, self.origins] = np.maximum(self.X.value.reshape(O, A).T, 0.0) * self.F
        x_r = np.maximum(self.x_r.value, 0.0) * self.F
        gam = None if self.gamma is None else np.maximum(self.gamma.value, 0.0) * self.F
        stats = self.problem.solver_stats
        return X, x_r, gam, {"status": status, "solver": "CLARABEL",
                             "iterations": getattr(stats, "num_iters", None)}


def _pwl_cost(pwl: PwlTravelTime, f, g):
    return float(np.dot(pwl(f), g))


def _finish(program: ConvexProgram, X, x_r, gamma, diag, converged=True) -> FlowSolution:
    f = total_arc_flow(X, x_r, program.x_p)
    t = program.pwl(f)
    J = float(np.dot(t, X.sum(axis=1) + program.rho * x_r))
    sol = FlowSolution(X, x_r, program.x_p.copy(), t, J, program.D_rp(gamma), gamma, converged, diag)
    sol.diagnostics["residuals"] = program.residuals(sol)
    return sol


def _project_gamma(program: ConvexProgram, gamma):
    """Least-norm correction so the demand equalities hold to rounding error."""
    if gamma is None:
        return None
    E = program.E
    r = program.alpha - E @ gamma
    if np.max(np.abs(r), initial=0.0) == 0.0:
        return gamma
    # correct only through self-pool columns (coefficient 2): keeps gamma >= 0 for small r
    selfc = program.catalog.self_column()
    g = gamma.copy()
    g[selfc] += r / 2.0
    if np.any(g < 0):
        return gamma
    return g


def solve(program: ConvexProgram, tol: float = 1e-9, model: _CvxModel | None = None,
          certificate: bool = False) -> FlowSolution:
    """Solve a routing or joint program.

    With ``certificate=True`` a Frank-Wolfe duality gap is computed from an
    independent LP over the same polytope and stored in the diagnostics.
    """
    if model is None:
        model = _CvxModel(program.network, program.pwl, program.origins, program.G, program.E)
    X, x_r, gamma, diag = model.solve(program.D_fixed[:, program.origins], program.x_p, program.alpha, tol)
    if program.catalog is not None and gamma is not None:
        gamma = _project_gamma(program, gamma)
        X, x_r = _repair_flows(program, X, x_r, gamma)
    else:
        X, x_r = _repair_flows(program, X, x_r, None)
    sol = _finish(program, X, x_r, gamma, diag,
                  converged=diag["status"] == cp.OPTIMAL)
    if program.rho < 1.0:
        sol = _local_descent(program, sol)
    if certificate:
        sol.diagnostics["fw_gap"] = duality_gap(program, sol)
    return sol


def solve_routing(network: Network, D_rp, pwl: PwlTravelTime, rho: float = 1.0, x_p=None,
                  tol: float = 1e-9) -> FlowSolution:
    """Optimal active and rebalancing flows for a fixed pooled demand matrix."""
    program = assemble_routing(network, D_rp, pwl, rho, x_p)
    if len(program.origins) == 0:
        z = np.zeros(network.n_arcs)
        return _finish(program, np.zeros((network.n_arcs, network.n_nodes)), z, None,
                       {"status": "trivial", "iterations": 0})
    return solve(program, tol)


class RoutingSolver:
    """Caches compiled routing models per origin set for repeated solves."""

    def __init__(self, network: Network, pwl: PwlTravelTime, rho: float = 1.0, tol: float = 1e-9):
        self.network, self.pwl, self.rho, self.tol = network, pwl, rho, tol
        self._models: dict = {}

    def __call__(self, D_rp, x_p=None) -> FlowSolution:
        program = assemble_routing(self.network, D_rp, self.pwl, self.rho, x_p)
        key = tuple(program.origins.tolist())
        if not key:
            return solve_routing(self.network, D_rp, self.pwl, self.rho, x_p)
        if key not in self._models:
            self._models[key] = _CvxModel(self.network, self.pwl, program.origins)
        return solve(program, self.tol, self._models[key])


def free_flow_routing(network: Network, D_rp, pwl: PwlTravelTime, rho: float = 1.0, x_p=None) -> FlowSolution:
    """Congestion-unaware routing: every leg on its free-flow shortest path,
    rebalancing at minimum free-flow cost, evaluated under the PWL law."""
    program = assemble_routing(network, D_rp, pwl, rho, x_p)
    D = program.D_fixed
    X = np.zeros((network.n_arcs, network.n_nodes))
    for o in program.origins:
        _, pred = shortest_paths(network, network.t0, int(o))
        for j in np.flatnonzero(D[:, o] > 0):
            if j != o:
                X[path_arcs(network, pred, int(j)), o] += D[j, o]
    x_r = rebalancing_feasibility_check(network, X)
    return _finish(program, X, x_r, None, {"status": "free_flow"})


# ---------------------------------------------------------------------------
# Flow repair, rebalancing certificate, duality gap, rho < 1 descent
# ---------------------------------------------------------------------------

def _min_cost_flow(network: Network, supply, cost=None):
    """Nonnegative arc flow with divergence ``supply`` at minimum ``cost``; None if infeasible."""
    cost = network.t0 if cost is None else cost
    B = incidence(network)
    if np.max(np.abs(supply), initial=0.0) == 0.0:
        return np.zeros(network.n_arcs)
    res = linprog(cost, A_eq=B[:-1], b_eq=supply[:-1], bounds=(0, None), method="highs")
    if res.status != 0:
        return None
    return np.maximum(res.x, 0.0)


def _repair_flows(program: ConvexProgram, X, x_r, gamma):
    """Remove the solver's residual imbalance with small corrective flows.

    Interior-point iterates satisfy the equalities only to the solver
    tolerance; a min-cost correction per origin column restores them to
    rounding error. If a correction fails the raw iterate is kept.
    """
    net = program.network
    B = incidence(net)
    D = program.D_rp(gamma)
    X = X.copy()
    for o in program.origins:
        r = D[:, o] + B @ X[:, o]  # missing inflow-minus-outflow
        if np.max(np.abs(r)) <= 1e-13 * max(1.0, np.abs(D[:, o]).max()):
            continue
        X[:, o] = _signed_correction(net, B, X[:, o], -r)
    r = -(B @ (X.sum(axis=1) + x_r))
    x_r = _signed_correction(net, B, x_r, r)
    return X, x_r


def _signed_correction(net, B, x, r):
    """Return ``y >= x`` with ``B y = B x + r``, routing the imbalance on free-flow paths."""
    r = r - r.mean()  # divergences always sum to zero
    src = [(v, r[v]) for v in np.flatnonzero(r > 0)]
    dst = [(v, -r[v]) for v in np.flatnonzero(r < 0)]
    y = x.copy()
    i = j = 0
    sp_cache = {}
    while i < len(src) and j < len(dst):
        (u, a), (w, b) = src[i], dst[j]
        q = min(a, b)
        if u not in sp_cache:
            sp_cache[u] = shortest_paths(net, net.t0, int(u))[1]
        arcs = path_arcs(net, sp_cache[u], int(w))
        if not arcs:
            return x
        y[arcs] += q
        src[i] = (u, a - q)
        dst[j] = (w, b - q)
        if src[i][1] <= 0:
            i += 1
        if dst[j][1] <= 0:
            j += 1
    return y


def rebalancing_feasibility_check(network: Network, X) -> np.ndarray:
    """A nonnegative rebalancing flow that balances the active flows ``X``.

    Raises ``InfeasibleProgram`` if the vehicle imbalance cannot be routed.
    """
    excess = divergence(network, np.asarray(X, dtype=float).sum(axis=1) if np.ndim(X) == 2 else X)
    x_r = _min_cost_flow(network, -excess)
    if x_r is None:
        raise InfeasibleProgram("rebalancing flow infeasible: network is not strongly connected "
                                "for the required imbalance")
    return x_r


def _gradient(program: ConvexProgram, X, x_r):
    f = total_arc_flow(X, x_r, program.x_p)
    g = X.sum(axis=1) + program.rho * x_r
    bp = program.pwl.breakpoints
    seg = (f > bp).astype(int)
    slope = program.pwl.slopes[np.arange(len(f)), seg]
    t = program.pwl(f)
    dX = t + slope * g
    dr = program.rho * t + slope * g
    return dX, dr


class _Polytope:
    """Equality-form LP data for the feasible set, used by the linear oracle."""

    def __init__(self, program: ConvexProgram):
        net = program.network
        n, A = net.n_nodes, net.n_arcs
        O = len(program.origins)
        self.O, self.A, self.n = O, A, n
        self.K = program.n_gamma
        B = incidence(net)
        keep = np.arange(n - 1)
        Br = B[keep]
        blocks = [sp.kron(sp.identity(O), -Br), sp.csr_matrix((O * (n - 1), A))]
        rhs = [program.D_fixed[:, program.origins][keep].T.reshape(-1)]
        if self.K:
            sub = np.concatenate([b * n + keep for b in range(O)])
            blocks.append(-program.G[sub])
        rows = [sp.hstack(blocks)]
        S = sp.kron(np.ones((1, O)), sp.identity(A))
        bal = [Br @ S, Br] + ([sp.csr_matrix((n - 1, self.K))] if self.K else [])
        rows.append(sp.hstack(bal))
        rhs.append(np.zeros(n - 1))
        if self.K:
            rows.append(sp.hstack([sp.csr_matrix((program.E.shape[0], O * A + A)), program.E]))
            rhs.append(program.alpha)
        self.A_eq = sp.vstack(rows, format="csr")
        self.b_eq = np.concatenate(rhs)

    def lmo(self, c):
        res = linprog(c, A_eq=self.A_eq, b_eq=self.b_eq, bounds=(0, None), method="highs")
        if res.status != 0:
            raise InfeasibleProgram(f"linear oracle failed: {res.message}")
        return res.x

    def pack(self, program, X, x_r, gamma):
        parts = [X[:, program.origins].T.reshape(-1), x_r]
        if self.K:
            parts.append(gamma)
        return np.concatenate(parts)

    def unpack(self, program, z):
        X = np.zeros((self.A, self.n))
        OA = self.O * self.A
        X[:, program.origins] = z[:OA].reshape(self.O, self.A).T
        x_r = z[OA:OA + self.A]
        gamma = z[OA + self.A:] if self.K else None
        return X, x_r, gamma


def duality_gap(program: ConvexProgram, sol: FlowSolution, kink_tol: float = 1e-6) -> float:
    """Relative Frank-Wolfe gap ``g^T (z - z_lmo) / |J|`` at ``sol``, minimised over subgradients.

    Arcs whose total flow sits on the breakpoint are nondifferentiable; their
    slope may take any value in ``[s0, s1]``. Dualising the linear oracle turns
    the min-max into one LP over the kink slopes and the oracle's duals ``y``:
    ``min c(s)^T z - b^T y  s.t.  A^T y <= c(s)``.
    """
    poly = _Polytope(program)
    pwl = program.pwl
    X, x_r = sol.X, sol.x_r
    f = total_arc_flow(X, x_r, program.x_p)
    g = X.sum(axis=1) + program.rho * x_r
    dX, dr = _gradient(program, X, x_r)
    c0 = np.concatenate([np.tile(dX, poly.O), dr] + ([np.zeros(poly.K)] if poly.K else []))
    z = poly.pack(program, X, x_r, sol.gamma)
    bp = pwl.breakpoints
    kink = np.flatnonzero((np.abs(f - bp) <= kink_tol * np.maximum(bp, 1.0)) & (g > 0))
    scale = max(abs(sol.J), 1e-12)
    if kink.size == 0:
        s_lmo = poly.lmo(c0)
        return float(max(0.0, c0 @ (z - s_lmo)) / scale)
    # c(s) = c0 + Kmat (s - s_current) on kink arcs, with the coefficient g_a
    A = poly.A
    seg = (f > bp).astype(int)
    s_cur = pwl.slopes[np.arange(len(f)), seg]
    rows, cols, vals = [], [], []
    for j, a in enumerate(kink):
        for b in range(poly.O):
            rows.append(b * A + a)
        rows.append(poly.O * A + a)
        cols.extend([j] * (poly.O + 1))
        vals.extend([g[a]] * (poly.O + 1))
    Kmat = sp.csr_matrix((vals, (rows, cols)), shape=(len(c0), kink.size))
    n_eq = poly.A_eq.shape[0]
    # variables: y (free, n_eq) then u = s - s_cur on kink arcs
    obj = np.concatenate([-poly.b_eq, Kmat.T @ z])
    A_ub = sp.hstack([poly.A_eq.T, -Kmat], format="csr")
    lo = pwl.slopes[kink, 0] - s_cur[kink]
    hi = pwl.slopes[kink, 1] - s_cur[kink]
    bounds = [(None, None)] * n_eq + list(zip(lo, hi))
    res = linprog(obj, A_ub=A_ub, b_ub=c0, bounds=bounds, method="highs")
    if res.status != 0:
        raise InfeasibleProgram(f"certificate LP failed: {res.message}")
    return float(max(0.0, c0 @ z + res.fun) / scale)


def _local_descent(program: ConvexProgram, start: FlowSolution, max_iter: int = 100,
                   tol: float = 1e-6) -> FlowSolution:
    """Monotone Frank-Wolfe descent for ``rho < 1``, started at the ``rho = 1`` optimum."""
    poly = _Polytope(program)
    X, x_r, gamma = start.X, start.x_r, start.gamma
    z = poly.pack(program, X, x_r, gamma)

    def cost(zz):
        XX, rr, _ = poly.unpack(program, zz)
        f = total_arc_flow(XX, rr, program.x_p)
        return _pwl_cost(program.pwl, f, XX.sum(axis=1) + program.rho * rr)

    J = cost(z)
    it = 0
    gap = np.inf
    for it in range(1, max_iter + 1):
        XX, rr, _ = poly.unpack(program, z)
        dX, dr = _gradient(program, XX, rr)
        c = np.concatenate([np.tile(dX, poly.O), dr] + ([np.zeros(poly.K)] if poly.K else []))
        s = poly.lmo(c)
        gap = float(c @ (z - s))
        if gap <= tol * max(abs(J), 1e-12):
            break
        d = s - z
        res = minimize_scalar(lambda lam: cost(z + lam * d), bounds=(0.0, 1.0), method="bounded",
                              options={"xatol": 1e-10})
        if res.fun < J:
            z = z + res.x * d
            J = res.fun
        else:
            break
    X, x_r, gamma = poly.unpack(program, z)
    diag = dict(start.diagnostics)
    diag.update({"local_descent_iterations": it, "local_descent_gap": gap, "experimental_rho": True})
    return _finish(program, np.maximum(X, 0.0), np.maximum(x_r, 0.0),
                   None if gamma is None else np.maximum(gamma, 0.0), diag, converged=start.converged)


def solve_joint(network: Network, catalog: ConfigCatalog, pwl: PwlTravelTime, rho: float = 1.0,
                x_p=None, D_fixed=None, tol: float = 1e-9, certificate: bool = False) -> FlowSolution:
    program = assemble_joint(network, catalog, pwl, rho, x_p, D_fixed)
    return solve(program, tol, certificate=certificate)
