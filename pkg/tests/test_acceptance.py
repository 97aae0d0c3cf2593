"""Acceptance criteria, one test each, reported in the terminal summary."""

import itertools
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from amod_flow.assign_greedy import assemble_drp_with_leftovers, greedy_assign
from amod_flow.cli import ScenarioConfig, compare_assignment, load_inputs, solve_point
from amod_flow.congestion import PwlTravelTime, arc_times, fit_network_pwl
from amod_flow.demand import Request, build_demand_matrix, scale, split_by_penetration
from amod_flow.joint_qp import RoutingSolver, assemble_joint, solve
from amod_flow.network import Network, all_pairs_times, incidence, sioux_falls
from amod_flow.pooling import pool_probability, precompute_catalog
from amod_flow.tap import all_or_nothing, solve_ue, wardrop_check

from conftest import best_ordering_improvement, random_network, random_requests

MIN = 1 / 60


@pytest.mark.acceptance(1, "pooling probability at the quoted rates")
def test_probability_quoted_values(record_property):
    p1 = pool_probability(50.0, 50.0, 10 * MIN)
    p2 = pool_probability(15.0, 15.0, 15 * MIN)
    record_property("P(50,50,10min)", f"{p1:.6f}")
    record_property("P(15,15,15min)", f"{p2:.6f}")
    assert abs(p1 - 0.9998) <= 5e-5
    assert 0.975 <= p2 <= 0.985


@pytest.mark.acceptance(2, "closed form vs Monte Carlo of two Poisson streams")
def test_probability_monte_carlo(record_property):
    rng = np.random.default_rng(20240601)
    n = 1_000_000
    worst = 0.0
    for alpha in (5.0, 15.0, 50.0):
        for t_bar in (2 * MIN, 10 * MIN, 15 * MIN):
            # first arrival of each stream after the reference instant
            tm = rng.exponential(1 / alpha, n)
            tn = rng.exponential(1 / alpha, n)
            p_hat = float(np.mean(np.abs(tm - tn) <= t_bar))
            se = np.sqrt(p_hat * (1 - p_hat) / n)
            z = abs(p_hat - pool_probability(alpha, alpha, t_bar)) / se
            worst = max(worst, z)
            assert z <= 3.0, (alpha, t_bar, p_hat)
    record_property("max |z|", f"{worst:.2f}")


@pytest.mark.acceptance(3, "greedy assignment equals the exhaustive-ordering optimum")
def test_greedy_optimality(record_property):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n_nodes = int(rng.integers(5, 10))
        net = random_network(n_nodes, int(rng.integers(2, 10)), seed)
        M = int(rng.integers(1, 5))
        reqs = random_requests(n_nodes, M, 1000 + seed)
        cat = precompute_catalog(net, reqs, np.inf)
        res, scores = greedy_assign(cat, net, net.t0, np.inf)
        pairs = list(zip(scores.m.tolist(), scores.n.tolist()))
        got = res.improvement(pairs, scores.delta)
        best = best_ordering_improvement([r.rate for r in reqs], pairs, scores.delta.tolist())
        worst = max(worst, abs(got - best))
        assert abs(got - best) <= 1e-9 * max(1.0, abs(best))
        assert res.iterations <= M * (M + 1) // 2
    record_property("max abs difference", f"{worst:.2e}")


def pair_grid(units=10):
    """Splits of at most ``units`` tenths over the four pair configurations."""
    for combo in itertools.product(range(units + 1), repeat=4):
        if sum(combo) <= units:
            yield combo


@pytest.mark.acceptance(4, "joint program not above any point of a dense assignment grid")
def test_joint_vs_grid(record_property):
    worst = -np.inf
    points = 0
    for seed in range(20):
        net = random_network(6, 4 + seed % 5, 300 + seed, capacity=(5.0, 25.0))
        reqs = random_requests(6, 2, 400 + seed, rate=(5.0, 30.0))
        pwl = fit_network_pwl(net)
        cat = precompute_catalog(net, reqs, np.inf)
        prog = assemble_joint(net, cat, pwl)
        sol = solve(prog)
        router = RoutingSolver(net, pwl)
        pair_cols = [k for k in range(len(cat)) if not cat.is_self[k]]
        assert len(pair_cols) == 4
        selfc = cat.self_column()
        a_m, a_n = reqs[0].rate, reqs[1].rate
        step = min(a_m, a_n) / 10
        best = np.inf
        for combo in pair_grid():
            g = np.zeros(len(cat))
            g[pair_cols] = np.array(combo) * step
            pooled = g[pair_cols].sum()
            g[selfc[0]] = (a_m - pooled) / 2
            g[selfc[1]] = (a_n - pooled) / 2
            best = min(best, router(prog.D_rp(g)).J)
            points += 1
        rel = (sol.J - best) / best
        worst = max(worst, rel)
        assert sol.J <= best * (1 + 1e-4), (seed, sol.J, best)
    record_property("grid points", points)
    record_property("max (J_joint - J_grid)/J_grid", f"{worst:.2e}")


def _residuals(net, sol, prog=None):
    B = incidence(net)
    out = {"flow": float(np.max(np.abs(-(B @ sol.X) - sol.D_rp))),
           "balance": float(np.max(np.abs(B @ (sol.X.sum(axis=1) + sol.x_r))))}
    if prog is not None and prog.catalog is not None:
        out["demand"] = float(np.max(np.abs(prog.E @ sol.gamma - prog.alpha)))
    return out


@pytest.mark.acceptance(5, "feasibility residuals of returned solutions")
def test_feasibility_residuals(record_property):
    cases = []
    for seed in range(10):
        net = random_network(8, 10, 500 + seed, capacity=(5.0, 30.0))
        reqs = random_requests(8, 4, 600 + seed)
        pwl = fit_network_pwl(net)
        prog = assemble_joint(net, precompute_catalog(net, reqs, 0.3), pwl,
                              D_fixed=build_demand_matrix(random_requests(8, 3, 700 + seed), 8))
        cases.append((net, solve(prog), prog, sum(r.rate for r in reqs) + 0.0))
    net, reqs = sioux_falls()
    reqs = scale(reqs, 0.2)
    _, individual, pooled = split_by_penetration(reqs, 1.0, 0.5)
    pooled = [r for r in pooled if r.rate >= 100]
    pwl = fit_network_pwl(net)
    x_p = all_or_nothing(net, net.t0, scale(reqs, 0.5))[0]
    prog = assemble_joint(net, precompute_catalog(net, pooled, 5 * MIN), pwl, x_p=x_p,
                          D_fixed=build_demand_matrix(individual, net.n_nodes))
    cases.append((net, solve(prog), prog, sum(r.rate for r in pooled) + sum(r.rate for r in individual)))
    worst = {"flow": 0.0, "balance": 0.0, "demand": 0.0}
    for net, sol, prog, alpha_sum in cases:
        bound = 1e-6 * max(1.0, alpha_sum)
        r = _residuals(net, sol, prog)
        for k in worst:
            worst[k] = max(worst[k], r[k])
        assert r["flow"] <= bound and r["balance"] <= bound
        assert r["demand"] <= 1e-8
        assert sol.X.min() >= -1e-8 and sol.x_r.min() >= -1e-8 and sol.gamma.min() >= -1e-8
    for k, v in worst.items():
        record_property(k, f"{v:.1e}")


@pytest.mark.acceptance(6, "private equilibrium: analytic split and Sioux Falls gap")
def test_equilibrium(record_property):
    net = Network.from_arcs(2, [(0, 1, 1.0, 1.0), (0, 1, 2.0, 1.0)])
    affine = PwlTravelTime(np.ones((2, 2)), np.array([[1.0, 1.0], [2.0, 2.0]]), np.ones(2))
    rep = solve_ue(net, [Request(0, 1, 3.0)], law="pwl", pwl=affine, gap_tol=1e-10)
    assert np.max(np.abs(rep.x_p - [2.0, 1.0])) <= 1e-6
    sf, reqs = sioux_falls()
    gap_tol = 1e-4
    rep = solve_ue(sf, reqs, gap_tol=gap_tol, max_iter=500)
    ok, worst = wardrop_check(sf, rep, reqs, rel_tol=10 * gap_tol)
    record_property("gap", f"{rep.relative_gap:.2e}")
    record_property("iterations", rep.iterations)
    record_property("worst used-path ratio", f"{worst:.6f}")
    assert rep.relative_gap <= gap_tol and rep.iterations <= 500
    assert ok


@pytest.mark.acceptance(7, "bi-level convergence on Sioux Falls at 10% demand")
def test_bilevel_convergence(record_property):
    cfg = ScenarioConfig.from_dict({"demand_scale": 0.1, "phi": [0.7], "psi": [0.5],
                                    "modes": ["aware_joint"], "delta_bar_min": 5, "t_bar_min": 10,
                                    "tol_obj": 1e-2, "max_rounds": 10})
    net, reqs = load_inputs(cfg)
    res = solve_point(cfg, net, reqs, 0.7, 0.5, "aware_joint")["result"]
    tr = res.trace
    record_property("rounds", res.rounds)
    record_property("operator J trace", json.dumps([round(v, 6) for v in tr]))
    assert res.converged and res.rounds <= 10
    assert abs(tr[-1] - tr[-2]) / abs(tr[-1]) <= 1e-2


@pytest.mark.acceptance(8, "aware vs unaware assignment with congestion-aware routing")
def test_aware_vs_unaware(record_property):
    cfg = ScenarioConfig.from_dict({"phi": [1.0], "psi": [1.0], "delta_bar_min": 5, "t_bar_min": 10,
                                    "modes": ["unaware_greedy", "aware_joint"]})
    out = compare_assignment(cfg, 1.0, 1.0, load_inputs(cfg))
    Ja, Ju = out["J_aware_joint"], out["J_unaware_greedy"]
    record_property("J_aware", f"{Ja:.2f}")
    record_property("J_unaware", f"{Ju:.2f}")
    record_property("relative difference", f"{out['relative_difference']:.4f}")
    record_property("J_free_flow (aware, unaware)",
                    f"{out['J_free_flow_aware_joint']:.2f}, {out['J_free_flow_unaware_greedy']:.2f}")
    assert abs(Ja - Ju) / Ja <= 0.05
    assert Ja <= out["J_free_flow_aware_joint"]
    assert Ju <= out["J_free_flow_unaware_greedy"]


def _vehicle_hours(net, D, t):
    # every leg on its shortest path under the frozen times
    T = all_pairs_times(net, t)
    off = D - np.diag(np.diag(D))
    return float(np.sum(off * T.T))


@pytest.mark.acceptance(9, "full pooling of duplicated identical-OD requests halves vehicle-hours")
def test_vehicle_hours_identity(record_property):
    net, base = sioux_falls()
    worst = 0.0
    scenarios = [(net, base[::7])]
    for seed in range(3):
        n = random_network(9, 12, 800 + seed)
        scenarios.append((n, random_requests(9, 8, 900 + seed)))
    for net, reqs in scenarios:
        n_nodes = net.n_nodes
        frozen = [net.t0, arc_times(net, all_or_nothing(net, net.t0, reqs)[0])]
        D = build_demand_matrix(reqs, n_nodes)
        # each request twice, as two identical-OD requests of the same rate
        dup = [r for r in reqs for _ in range(2)]
        cat = precompute_catalog(net, dup, 0.0)
        gamma = np.zeros(len(cat))
        for k in range(len(cat)):
            m, n = int(cat.m[k]), int(cat.n[k])
            if m != n and m // 2 == n // 2 and cat.c[k] == 1:
                gamma[k] = dup[m].rate
        prog = assemble_joint(net, cat, fit_network_pwl(net))
        assert np.max(np.abs(prog.E @ gamma - prog.alpha)) == 0.0
        D_dup = 2 * D
        D_pool = prog.D_rp(gamma)
        # self-pooling each original request at alpha/2 is the same vehicle demand
        cat1 = precompute_catalog(net, reqs, 0.0)
        g1 = np.zeros(len(cat1))
        g1[cat1.self_column()] = [r.rate / 2 for r in reqs]
        D_self = assemble_joint(net, cat1, fit_network_pwl(net)).D_rp(g1)
        for t in frozen:
            for unpooled, pooled in ((D_dup, D_pool), (D, D_self)):
                vu, vp = _vehicle_hours(net, unpooled, t), _vehicle_hours(net, pooled, t)
                worst = max(worst, abs(vp / vu - 0.5))
                assert abs(vp - 0.5 * vu) <= 1e-8 * vu
        # the greedy leftover bookkeeping agrees
        best = cat1.self_column()
        Dg = assemble_drp_with_leftovers(D, reqs, np.diag([r.rate / 2 for r in reqs]), cat1, best)
        assert np.allclose(Dg, D / 2, rtol=0, atol=1e-9 * np.abs(D).max())
    record_property("max |ratio - 1/2|", f"{worst:.1e}")


@pytest.mark.acceptance(10, "two runs of the CLI give byte-identical metrics.csv")
def test_cli_determinism(tmp_path, record_property):
    cfg = {"network": "sioux_falls", "demand_scale": 0.05, "phi": [0.7], "psi": [0.5],
           "modes": ["unaware_greedy", "aware_joint"], "delta_bar_min": 5, "t_bar_min": 10,
           "pool_top_k": 30}
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(cfg))
    exe = shutil.which("amod-flow")
    cmd = [exe] if exe else [sys.executable, "-m", "amod_flow.cli"]
    outs = []
    for name in ("a", "b"):
        proc = subprocess.run(cmd + ["run", "--config", str(path), "--out", str(tmp_path / name)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append((tmp_path / name / "metrics.csv").read_bytes())
    record_property("metrics.csv bytes", len(outs[0]))
    assert outs[0] == outs[1]
