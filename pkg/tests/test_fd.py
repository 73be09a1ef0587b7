import numpy as np
import pytest

from reflectmc.fd import (FDGrid1D, FDGrid2D, solve_backward_1d,
                          solve_backward_2d, sup_norm, trace_on_observation)
from reflectmc.geometry import FixedDomain, TimeVaryingDomain
from reflectmc.problem import CoefficientSet, Problem, SourceData


def _interval_problem(**src):
    base = FixedDomain(kind="interval", robin_ends=frozenset({"left"}))
    dom = TimeVaryingDomain.build(base, horizon=1.0)
    return Problem(domain=dom,
                   coeffs=CoefficientSet.parse(1, A=0.5, a_scal="0.25",
                                               sigma_rob="1"),
                   sources=SourceData.parse(1, **src), T=1.0)


def test_1d_zero_data_zero_field():
    sol = solve_backward_1d(_interval_problem(), FDGrid1D(h=1 / 50, k=1 / 100))
    assert sup_norm(sol) == 0.0


def test_1d_maximum_principle():
    # f = psi = 0, a_scal >= 0: max |u| <= max |h|
    prob = _interval_problem(h="x1*(1-x1)")
    sol = solve_backward_1d(prob, FDGrid1D(h=1 / 100, k=1 / 200))
    assert sup_norm(sol) <= 0.25 + 1e-6


def test_1d_dirichlet_nodes_exact_zero():
    prob = _interval_problem(f="1", psi="0.5", h="x1*(1-x1)")
    sol = solve_backward_1d(prob, FDGrid1D(h=1 / 50, k=1 / 100))
    for s in (0.0, 0.3, 0.9):
        assert sol(s, np.array([1.0])) == 0.0


def test_1d_richardson_self_convergence():
    prob = _interval_problem(f="1", psi="0.5", h="x1*(1-x1)")
    vals = []
    for lev in range(3):
        grid = FDGrid1D(h=1 / (50 * 2 ** lev), k=1 / (100 * 2 ** lev))
        sol = solve_backward_1d(prob, grid)
        vals.append(sol(0.5, np.array([0.5])))
    ratio = abs(vals[1] - vals[0]) / abs(vals[2] - vals[1])
    assert 3.0 <= ratio <= 5.0


def _disk_problem(keyframes=None, **src):
    base = FixedDomain(kind="disk", robin_arcs=((-np.pi, np.pi),))
    dom = TimeVaryingDomain.build(base, keyframes=keyframes, horizon=1.0)
    return Problem(domain=dom, coeffs=CoefficientSet.parse(2, A=0.5),
                   sources=SourceData.parse(2, **src), T=1.0)


def test_2d_zero_data_zero_field():
    sol = solve_backward_2d(_disk_problem(), FDGrid2D(nr=16, ntheta=24, nt=20))
    assert sup_norm(sol) == 0.0


def test_2d_maximum_principle_h_one():
    # gamma = 0 pure reflection with h = 1: u = 1 up to grid tolerance
    sol = solve_backward_2d(_disk_problem(h="1"),
                            FDGrid2D(nr=16, ntheta=24, nt=20))
    assert sup_norm(sol) <= 1.0 + 1e-8
    assert abs(sol(0.0, np.array([0.3, 0.2])) - 1.0) < 1e-8


def test_2d_cavity_nodes_masked_zero():
    prob = _disk_problem(keyframes=[(0.0, 0.0, 0.0, 0.3)], h="1")
    sol = solve_backward_2d(prob, FDGrid2D(nr=24, ntheta=32, nt=30))
    assert abs(sol(0.5, np.array([0.1, 0.0]))) < 1e-12
    # survival probability strictly below 1 with an absorbing cavity
    assert sol(0.0, np.array([0.6, 0.0])) < 1.0


def test_trace_on_observation_zero_solution():
    sol = solve_backward_2d(_disk_problem(), FDGrid2D(nr=12, ntheta=16, nt=10))
    angles = np.linspace(-0.5, 0.5, 5)
    tr = trace_on_observation(sol, angles, np.linspace(0.0, 0.9, 4))
    assert tr.shape == (4, 5)
    assert np.all(tr == 0.0)


def test_trace_row_major_time_ordering():
    prob = _interval_problem(f="1", psi="0.5", h="x1*(1-x1)")
    sol = solve_backward_1d(prob, FDGrid1D(h=1 / 50, k=1 / 100))
    times = np.array([0.0, 0.5])
    tr = trace_on_observation(sol, "left", times)
    assert tr.shape == (2, 1)
    assert np.isclose(tr[0, 0], sol(0.0, np.array([0.0])))
