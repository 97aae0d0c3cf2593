import numpy as np
import pytest

from amod_flow.congestion import PwlTravelTime, fit_network_pwl
from amod_flow.demand import Request, build_demand_matrix
from amod_flow.joint_qp import RoutingSolver
from amod_flow.network import Network
from amod_flow.tap import (all_or_nothing, beckmann, bilevel_solve, decompose_paths, solve_ue,
                           wardrop_check)

from conftest import random_network, random_requests


def affine_pair():
    # t1 = 1 + x, t2 = 2 + x as a piecewise law with two equal lines
    net = Network.from_arcs(2, [(0, 1, 1.0, 1.0), (0, 1, 2.0, 1.0)])
    s = np.array([[1.0, 1.0], [1.0, 1.0]])
    b = np.array([[1.0, 1.0], [2.0, 2.0]])
    return net, PwlTravelTime(s, b, np.array([1.0, 1.0]))


def test_all_or_nothing_examples(line3):
    x, mt = all_or_nothing(line3, line3.t0, [Request(0, 2, 5.0)])
    assert x.tolist() == [5.0, 5.0] and mt.tolist() == [3.0]
    par = Network.from_arcs(2, [(0, 1, 1.0, 1.0), (0, 1, 1.0, 1.0)])
    x, _ = all_or_nothing(par, par.t0, [Request(0, 1, 4.0)])
    assert x.tolist() == [4.0, 0.0]
    reqs = random_requests(8, 6, 1)
    net = random_network(8, 10, 1)
    Y, _ = all_or_nothing(net, net.t0, reqs, per_request=True)
    # each column carries its rate out of the origin
    for k, r in enumerate(reqs):
        out = sum(Y[a, k] for a in net.out_arcs(r.origin))
        assert out == pytest.approx(r.rate)
    with pytest.raises(ValueError):
        all_or_nothing(net, np.zeros(net.n_arcs), reqs)


def test_beckmann_bpr_closed_form():
    net = Network.from_arcs(2, [(0, 1, 2.0, 10.0)])
    # integral of 2 (1 + 0.15 (f/10)^4) from 0 to 10
    assert beckmann(net, np.array([10.0])) == pytest.approx(2 * (10 + 0.15 * 10 / 5))
    assert beckmann(net, np.array([5.0]), np.array([5.0])) == pytest.approx(
        beckmann(net, np.array([10.0])) - beckmann(net, np.array([5.0])))


def test_single_arc():
    net = Network.from_arcs(2, [(0, 1, 1.0, 10.0)])
    rep = solve_ue(net, [Request(0, 1, 7.0)])
    assert rep.x_p.tolist() == [7.0] and rep.relative_gap == 0.0
    assert rep.iterations == 1 and rep.converged


@pytest.mark.parametrize("method", ["pfw", "fw", "cfw"])
def test_symmetric_parallel_split(method):
    net = Network.from_arcs(2, [(0, 1, 1.0, 10.0), (0, 1, 1.0, 10.0)])
    rep = solve_ue(net, [Request(0, 1, 30.0)], gap_tol=1e-8, method=method)
    assert rep.x_p == pytest.approx([15.0, 15.0], abs=1e-4)


@pytest.mark.parametrize("method", ["pfw", "fw", "cfw"])
def test_affine_split(method):
    net, pwl = affine_pair()
    rep = solve_ue(net, [Request(0, 1, 3.0)], law="pwl", pwl=pwl, gap_tol=1e-10, method=method)
    assert rep.x_p == pytest.approx([2.0, 1.0], abs=1e-6)


def test_background_shifts_equilibrium():
    net, pwl = affine_pair()
    rep = solve_ue(net, [Request(0, 1, 3.0)], background=np.array([1.0, 0.0]), law="pwl", pwl=pwl,
                   gap_tol=1e-10)
    # 1 + (1 + x) = 2 + (3 - x)  ->  x = 1.5
    assert rep.x_p == pytest.approx([1.5, 1.5], abs=1e-6)


@pytest.mark.parametrize("method", ["pfw", "fw", "cfw"])
def test_potential_non_increasing(method):
    net = random_network(10, 14, 5, capacity=(5.0, 20.0))
    reqs = random_requests(10, 12, 5, rate=(5.0, 30.0))
    rep = solve_ue(net, reqs, gap_tol=1e-6, max_iter=200, method=method)
    pot = np.array(rep.potential_trace)
    assert np.all(np.diff(pot) <= 1e-9 * np.abs(pot[:-1]))


@pytest.mark.parametrize("seed", range(3))
def test_wardrop_on_random_networks(seed):
    net = random_network(10, 14, seed, capacity=(5.0, 20.0))
    reqs = random_requests(10, 15, seed, rate=(5.0, 30.0))
    gap_tol = 1e-4
    rep = solve_ue(net, reqs, gap_tol=gap_tol)
    assert rep.converged and rep.relative_gap <= gap_tol
    ok, worst = wardrop_check(net, rep, reqs, rel_tol=10 * gap_tol)
    assert ok, worst
    assert rep.x_p.sum() > 0 and np.allclose(rep.per_request.sum(axis=1), rep.x_p)


def test_invalid_arguments():
    net = Network.from_arcs(2, [(0, 1, 1.0, 10.0)])
    with pytest.raises(ValueError):
        solve_ue(net, [Request(0, 1, 1.0)], gap_tol=0.0)
    with pytest.raises(ValueError):
        solve_ue(net, [Request(0, 1, 1.0)], method="msa")
    rep = solve_ue(net, [])
    assert rep.converged and not rep.x_p.any()


def test_decompose_paths_recovers_split():
    net = Network.from_arcs(3, [(0, 1, 1.0, 1.0), (1, 2, 1.0, 1.0), (0, 2, 3.0, 1.0)])
    paths = decompose_paths(net, np.array([2.0, 2.0, 1.0]), 0, {2: 3.0}, net.t0)
    got = sorted((tuple(p), q, c) for _, p, q, c in paths)
    assert got == [((0, 1), 2.0, 2.0), ((2,), 1.0, 3.0)]


def operator_for(net, pwl, reqs):
    D = build_demand_matrix(reqs, net.n_nodes)
    router = RoutingSolver(net, pwl)
    return lambda x_p: (router(D, x_p), {})


def test_bilevel_without_private_demand():
    net = random_network(6, 6, 0, capacity=(10.0, 30.0))
    pwl = fit_network_pwl(net)
    res = bilevel_solve(net, [], operator_for(net, pwl, random_requests(6, 3, 0)))
    assert res.rounds == 1 and res.converged and not res.equilibrium.x_p.any()


def test_bilevel_without_amod():
    net = random_network(6, 6, 1, capacity=(10.0, 30.0))
    reqs = random_requests(6, 4, 1)

    def never(x_p):
        raise AssertionError("operator must not run")

    res = bilevel_solve(net, reqs, never, has_amod=False)
    pure = solve_ue(net, reqs)
    assert res.rounds == 1 and res.trace == [0.0]
    assert np.allclose(res.equilibrium.x_p, pure.x_p)


def test_bilevel_infinite_capacity_two_rounds():
    net = random_network(7, 8, 2, capacity=(1e12, 1e12))
    pwl = fit_network_pwl(net)
    reqs = random_requests(7, 6, 2)
    res = bilevel_solve(net, reqs[:3], operator_for(net, pwl, reqs[3:]))
    assert res.converged and res.rounds <= 2
    assert len(res.combined_trace) == res.rounds


def test_bilevel_congested_records_trace():
    net = random_network(8, 12, 3, capacity=(5.0, 15.0))
    pwl = fit_network_pwl(net)
    reqs = random_requests(8, 10, 3, rate=(5.0, 20.0))
    res = bilevel_solve(net, reqs[:5], operator_for(net, pwl, reqs[5:]), max_rounds=10)
    assert len(res.trace) == res.rounds
    if res.converged:
        assert abs(res.trace[-1] - res.trace[-2]) <= 1e-2 * abs(res.trace[-1])
    with pytest.raises(ValueError):
        bilevel_solve(net, reqs, operator_for(net, pwl, reqs), max_rounds=0)
