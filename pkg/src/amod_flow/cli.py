"""Scenario runner and the ``amod-flow`` command line.

A scenario JSON names a network, its trips, the pooling thresholds and a
grid of AMoD penetration (``phi``) and pooling fraction (``psi``) values.
Each grid point and assignment mode is solved independently through the
operator/private bi-level loop; results go to ``metrics.csv``, one link
table per point and a JSON trace per point.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .assign_greedy import fixed_point_assignment
from .congestion import arc_times, fit_network_pwl
from .demand import (leg_matrix, requests_from_json, scale, split_by_penetration, top_k,
                     total_rate)
from .joint_qp import RoutingSolver, free_flow_routing, solve_joint
from .metrics import per_class_avg_time, private_avg_time, sigma_summary, MINUTES_PER_HOUR
from .network import load_network, load_tntp, sioux_falls
from .pooling import precompute_catalog
from .tap import bilevel_solve

log = logging.getLogger(__name__)

MODES = ("unaware_greedy", "aware_joint")
LAWS = ("bpr", "pwl")


@dataclass
class ScenarioConfig:
    network: str = "sioux_falls"
    trips: str | None = None
    requests: list | None = None
    delta_bar_min: float = 5.0
    t_bar_min: float = 10.0
    rho: float = 1.0
    phi: list = field(default_factory=lambda: [1.0])
    psi: list = field(default_factory=lambda: [1.0])
    demand_scale: float = 1.0
    law: str = "bpr"  # travel-time law of private drivers and of the reported times
    theta: float = 1.0
    modes: list = field(default_factory=lambda: ["aware_joint"])
    tol_obj: float = 1e-2
    max_rounds: int = 10
    gap_tol: float = 1e-4
    ue_max_iter: int = 500
    qp_tol: float = 1e-9
    fixed_point_iter: int = 1
    fixed_point_tol: float = 1e-2
    pool_top_k: int | None = None
    min_pool_rate: float = 0.0
    output_dir: str = "out"
    dump_solutions: bool = False
    base_dir: str = "."

    def __post_init__(self):
        if isinstance(self.t_bar_min, str):
            self.t_bar_min = float(self.t_bar_min)
        if isinstance(self.modes, str):
            self.modes = [self.modes]
        self.phi = [float(v) for v in self.phi]
        self.psi = [float(v) for v in self.psi]
        if not self.delta_bar_min >= 0:
            raise ValueError("delta_bar_min must be nonnegative")
        if not self.t_bar_min > 0:
            raise ValueError("t_bar_min must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not self.phi or not self.psi or not self.modes:
            raise ValueError("phi, psi and modes lists must be nonempty")
        for v in list(self.phi) + list(self.psi):
            if not 0.0 <= v <= 1.0:
                raise ValueError("phi and psi values must lie in [0, 1]")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown assignment mode {m!r}")
        if self.law not in LAWS:
            raise ValueError(f"unknown law {self.law!r}")
        if not self.demand_scale > 0:
            raise ValueError("demand_scale must be positive")
        if self.trips is None and self.requests is None and self.network != "sioux_falls":
            raise ValueError("a trips file or inline requests is required")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ScenarioConfig":
        d = dict(d)
        if "mode" in d and "modes" not in d:
            d["modes"] = d.pop("mode")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        d.setdefault("base_dir", str(base_dir))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def delta_bar(self) -> float:
        return self.delta_bar_min / MINUTES_PER_HOUR

    @property
    def t_bar(self) -> float:
        return self.t_bar_min / MINUTES_PER_HOUR

    def grid(self):
        return [(phi, psi, mode) for phi in self.phi for psi in self.psi for mode in self.modes]


def load_inputs(config: ScenarioConfig):
    """Network and (scaled) base requests of a scenario."""
    if config.network == "sioux_falls" and config.trips is None and config.requests is None:
        net, reqs = sioux_falls()
    else:
        path = config.resolve(config.network)
        if path.suffix == ".json":
            net = load_network(path)
            reqs = []
        else:
            net, reqs = load_tntp(path, config.resolve(config.trips) if config.trips else None)
        if config.requests is not None:
            reqs = requests_from_json(config.requests)
        elif config.trips and path.suffix == ".json":
            reqs = requests_from_json(json.loads(config.resolve(config.trips).read_text()))
    if config.demand_scale != 1.0:
        reqs = scale(reqs, config.demand_scale)
    return net, reqs


@dataclass
class MetricsRow:
    phi: float
    psi: float
    mode: str
    status: str
    avg_private_min: float
    avg_individual_min: float
    avg_pooled_min: float
    J: float
    J_combined: float
    sigma_max: float
    sigma_mean: float
    sigma_count: int
    rounds: int
    converged: bool
    private_rate: float
    individual_rate: float
    pooled_rate: float


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _tag(v: float) -> str:
    return f"{v:g}"


class _Operator:
    """Operator program of one grid point as a function of private flows."""

    def __init__(self, config, net, pwl, catalog, individual, mode):
        self.config, self.net, self.pwl, self.catalog, self.mode = config, net, pwl, catalog, mode
        # individual demand may repeat an OD (pooling candidates left out by top-k)
        self.D_ind = leg_matrix([r.od for r in individual], net.n_nodes, [r.rate for r in individual])
        self.router = RoutingSolver(net, pwl, config.rho, config.qp_tol)

    def __call__(self, x_p):
        cfg = self.config
        if self.catalog is None:
            return self.router(self.D_ind, x_p), None
        if self.mode == "aware_joint":
            sol = solve_joint(self.net, self.catalog, self.pwl, cfg.rho, x_p, self.D_ind, cfg.qp_tol)
            return sol, sol.gamma
        fp = fixed_point_assignment(self.net, self.catalog, self.pwl, cfg.t_bar, cfg.rho, x_p, self.D_ind,
                                    law=cfg.law, max_iter=cfg.fixed_point_iter, tol=cfg.fixed_point_tol,
                                    router=self.router)
        return fp.solution, fp.gamma_columns


def solve_point(config: ScenarioConfig, net, requests, phi: float, psi: float, mode: str) -> dict:
    """Bi-level solution of one grid point; returns the raw pieces for reporting."""
    private, individual, pooled = split_by_penetration(requests, phi, psi)
    if config.pool_top_k is not None:
        pooled_kept = top_k(pooled, config.pool_top_k)
        kept = {r.od for r in pooled_kept}
        # requests left out of pooling are served individually
        individual = individual + [r for r in pooled if r.od not in kept]
        pooled = pooled_kept
    pwl = fit_network_pwl(net, config.theta)
    catalog = precompute_catalog(net, pooled, config.delta_bar, config.min_pool_rate) if pooled else None
    op = _Operator(config, net, pwl, catalog, individual, mode)
    has_amod = bool(individual or pooled)
    res = bilevel_solve(net, private, op, config.tol_obj, config.max_rounds, has_amod=has_amod,
                        ue_law=config.law, pwl=pwl, gap_tol=config.gap_tol, ue_max_iter=config.ue_max_iter)
    return {"private": private, "individual": individual, "pooled": pooled, "catalog": catalog,
            "pwl": pwl, "result": res, "operator": op}


def evaluate_point(config: ScenarioConfig, net, phi, psi, mode, pieces) -> tuple:
    """Metrics row, link table and trace of a solved grid point."""
    res = pieces["result"]
    eq = res.equilibrium
    A = net.n_arcs
    sol = res.solution
    X = sol.X if sol is not None else np.zeros((A, net.n_nodes))
    x_r = sol.x_r if sol is not None else np.zeros(A)
    total = X.sum(axis=1) + x_r + eq.x_p
    t = arc_times(net, total, config.law, pieces["pwl"])
    if sol is not None:
        cls = per_class_avg_time(net, X, sol.D_rp, t, pieces["individual"], pieces["catalog"],
                                 res.operator_info)
    else:
        cls = {"individual": float("nan"), "pooled": float("nan")}
    if not pieces["individual"]:
        cls["individual"] = float("nan")
    sig = sigma_summary(total, net.capacity)
    row = MetricsRow(phi, psi, mode, "ok" if res.converged else "not_converged",
                     private_avg_time(t, eq.x_p, pieces["private"]) * MINUTES_PER_HOUR,
                     cls["individual"], cls["pooled"],
                     res.trace[-1], res.combined_trace[-1], sig["sigma_max"], sig["sigma_mean"],
                     sig["sigma_count"], res.rounds, res.converged,
                     total_rate(pieces["private"]), total_rate(pieces["individual"]),
                     total_rate(pieces["pooled"]))
    sigma = np.maximum(0.0, total - net.capacity) / net.capacity
    links = [{"arc": a, "tail": int(net.tail[a]), "head": int(net.head[a]),
              "amod": float(X[a].sum()), "rebalancing": float(x_r[a]), "private": float(eq.x_p[a]),
              "total": float(total[a]), "capacity": float(net.capacity[a]), "time_h": float(t[a]),
              "sigma": float(sigma[a])} for a in range(A)]
    trace = {"phi": phi, "psi": psi, "mode": mode, "operator_J": res.trace,
             "combined_J": res.combined_trace, "rounds": res.rounds, "converged": res.converged,
             "equilibrium": {"relative_gap": eq.relative_gap, "iterations": eq.iterations,
                             "converged": eq.converged},
             "catalog": pieces["catalog"].summary() if pieces["catalog"] is not None else None,
             "notes": "waiting time for a match is excluded from pooled travel times"}
    if sol is not None:
        trace["residuals"] = sol.diagnostics.get("residuals")
    if config.dump_solutions and sol is not None:
        trace["solution"] = {"X": X.tolist(), "x_r": x_r.tolist(), "x_p": eq.x_p.tolist(),
                             "gamma": None if res.operator_info is None else np.asarray(res.operator_info).tolist()}
    return row, links, trace


def run_point(config: ScenarioConfig, phi: float, psi: float, mode: str, inputs=None):
    start = time.perf_counter()
    net, reqs = inputs if inputs is not None else load_inputs(config)
    try:
        pieces = solve_point(config, net, reqs, phi, psi, mode)
        row, links, trace = evaluate_point(config, net, phi, psi, mode, pieces)
    except Exception as exc:  # isolate failures per grid point
        log.exception("grid point phi=%s psi=%s mode=%s failed", phi, psi, mode)
        nan = float("nan")
        row = MetricsRow(phi, psi, mode, f"error: {type(exc).__name__}: {exc}", nan, nan, nan, nan, nan,
                         nan, nan, 0, 0, False, nan, nan, nan)
        links, trace = None, {"phi": phi, "psi": psi, "mode": mode, "error": str(exc)}
    trace["wall_time_s"] = time.perf_counter() - start
    return row, links, trace


def _run_point_job(args):
    config, phi, psi, mode = args
    return run_point(config, phi, psi, mode)


def run_scenario(config: ScenarioConfig, out_dir=None, jobs: int = 1) -> list[MetricsRow]:
    """Solve every grid point and write ``metrics.csv``, link tables and traces."""
    out = Path(out_dir) if out_dir is not None else config.resolve(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = config.grid()
    if jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_point_job, [(config, *g) for g in grid]))
    else:
        inputs = load_inputs(config)
        results = [run_point(config, *g, inputs=inputs) for g in grid]
    rows = []
    for row, links, trace in results:
        tag = f"{_tag(row.phi)}_{_tag(row.psi)}_{row.mode}"
        if links is not None:
            write_csv(out / f"links_{tag}.csv", links)
        (out / f"trace_{tag}.json").write_text(json.dumps(trace, indent=1, default=_json_default))
        rows.append(row)
    write_csv(out / "metrics.csv", [asdict(r) for r in rows])
    return rows


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])


def compare_assignment(config: ScenarioConfig, phi: float, psi: float, inputs=None) -> dict:
    """Aware (joint) and unaware (greedy) assignment at one grid point.

    Both use congestion-aware routing. Each is also compared with routing
    its own pooled demand on free-flow shortest paths.
    """
    net, reqs = inputs if inputs is not None else load_inputs(config)
    out = {"phi": phi, "psi": psi}
    sig = {}
    for mode in MODES:
        pieces = solve_point(config, net, reqs, phi, psi, mode)
        res = pieces["result"]
        sol = res.solution
        out[f"J_{mode}"] = res.trace[-1]
        if sol is not None:
            ff = free_flow_routing(net, sol.D_rp, pieces["pwl"], config.rho, sol.x_p)
            out[f"J_free_flow_{mode}"] = ff.J
            sig[mode] = np.maximum(0.0, sol.total_flow - net.capacity) / net.capacity
        else:
            out[f"J_free_flow_{mode}"] = 0.0
            sig[mode] = np.zeros(net.n_arcs)
        out[f"rounds_{mode}"] = res.rounds
    Ja = out["J_aware_joint"]
    out["relative_difference"] = abs(Ja - out["J_unaware_greedy"]) / Ja if Ja > 0 else 0.0
    out["links"] = [{"arc": a, "tail": int(net.tail[a]), "head": int(net.head[a]),
                     "sigma_aware": float(sig["aware_joint"][a]),
                     "sigma_unaware": float(sig["unaware_greedy"][a]),
                     "sigma_difference": float(sig["unaware_greedy"][a] - sig["aware_joint"][a])}
                    for a in range(net.n_arcs)]
    return out


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def _cmd_run(args) -> int:
    config = ScenarioConfig.load(args.config)
    rows = run_scenario(config, args.out, args.jobs)
    bad = [r for r in rows if r.status.startswith("error")]
    for r in rows:
        print(f"phi={_tag(r.phi)} psi={_tag(r.psi)} {r.mode}: {r.status} J={_fmt(r.J)} rounds={r.rounds}")
    return 0 if not bad else 1


def _cmd_catalog(args) -> int:
    net, reqs = load_tntp(args.net, args.trips)
    if args.scale != 1.0:
        reqs = scale(reqs, args.scale)
    _, _, pooled = split_by_penetration(reqs, args.phi, args.psi)
    if args.top_k:
        pooled = top_k(pooled, args.top_k)
    cat = precompute_catalog(net, pooled, args.dbar / MINUTES_PER_HOUR, args.min_rate)
    if args.out:
        cat.save(args.out)
    print(json.dumps(cat.summary(), indent=1, default=_json_default))
    return 0


def _cmd_compare(args) -> int:
    config = ScenarioConfig.load(args.config)
    out = Path(args.out) if args.out else config.resolve(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = load_inputs(config)
    ok = True
    summary = []
    for phi in config.phi:
        for psi in config.psi:
            try:
                res = compare_assignment(config, phi, psi, inputs)
            except Exception as exc:
                log.exception("comparison phi=%s psi=%s failed", phi, psi)
                summary.append({"phi": phi, "psi": psi, "error": str(exc)})
                ok = False
                continue
            write_csv(out / f"compare_{_tag(phi)}_{_tag(psi)}.csv", res.pop("links"))
            summary.append(res)
            print(f"phi={_tag(phi)} psi={_tag(psi)}: J aware={res['J_aware_joint']:.6g} "
                  f"unaware={res['J_unaware_greedy']:.6g} rel.diff={res['relative_difference']:.3g}")
    (out / "compare_summary.json").write_text(json.dumps(summary, indent=1, default=_json_default))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amod-flow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="solve a scenario grid")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=_cmd_run)
    c = sub.add_parser("catalog", help="precompute the pooling configuration catalog")
    c.add_argument("--net", required=True)
    c.add_argument("--trips", required=True)
    c.add_argument("--dbar", type=float, required=True, help="detour threshold [min]")
    c.add_argument("--phi", type=float, default=1.0)
    c.add_argument("--psi", type=float, default=1.0)
    c.add_argument("--scale", type=float, default=1.0)
    c.add_argument("--top-k", type=int)
    c.add_argument("--min-rate", type=float, default=0.0)
    c.add_argument("--out")
    c.set_defaults(func=_cmd_catalog)
    m = sub.add_parser("compare-assignment", help="aware vs unaware pooling assignment")
    m.add_argument("--config", required=True)
    m.add_argument("--out")
    m.set_defaults(func=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"amod-flow: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
