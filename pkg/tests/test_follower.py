import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import instance, solved
from oracles import exact_costs, random_problem, scipy_riccati
from stackelberg_lq.follower import (follower_gains, follower_stationarity_residual,
                                     follower_value, reconstruct_adjoint, riccati_residual,
                                     solve_follower, solve_phi, solve_riccati_P)
from stackelberg_lq.model import Dims, ProblemData
from stackelberg_lq.numerics import MatrixPath, TimeGrid


def tanh_problem(horizon=1.0, **over):
    z, o = [[0.0]], [[1.0]]
    kw = dict(A=z, B1=o, B2=o, C=[z], D1=[z], D2=[[[1.0]]], Q1=o, Q2=o, S1=z, S2=[[0.5]],
              R1=o, R2=o, G1=z, G2=o)
    kw.update(over)
    return ProblemData(Dims(1, 1, 1, 1), horizon, [1.0], **kw)


def test_tanh_closed_form():
    grid = TimeGrid(1.0, 1000)
    P = solve_riccati_P(tanh_problem(), grid)
    np.testing.assert_allclose(P.values[:, 0, 0], np.tanh(1.0 - grid.nodes), atol=1e-12)
    np.testing.assert_allclose(P.mid[:, 0, 0], np.tanh(1.0 - grid.mids), atol=1e-10)


def test_tanh_other_horizon():
    grid = TimeGrid(2.5, 500)
    P = solve_riccati_P(tanh_problem(2.5), grid)
    assert abs(P.values[0, 0, 0] - np.tanh(2.5)) < 1e-10


@pytest.mark.parametrize("seed,n,k1,d", [(0, 2, 1, 1), (1, 3, 2, 2), (2, 1, 1, 2)])
def test_riccati_matches_scipy(seed, n, k1, d):
    data = random_problem(np.random.default_rng(seed), n, k1, 1, d)
    grid = TimeGrid(1.0, 200)
    P = solve_riccati_P(data, grid)
    ref = scipy_riccati(data, grid.nodes)
    assert np.abs(P.values - ref).max() < 1e-9


def test_riccati_residual_small():
    data = random_problem(np.random.default_rng(4), 3, 2, 2, 2)
    grid = TimeGrid(1.0, 2000)
    assert riccati_residual(solve_riccati_P(data, grid), data) < 1e-5


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 3), d=st.integers(1, 2))
def test_P_symmetric_psd(seed, n, d):
    data = random_problem(np.random.default_rng(seed), n, 1, 1, d)
    P = solve_riccati_P(data, TimeGrid(1.0, 50))
    np.testing.assert_array_equal(P.values, P.values.swapaxes(1, 2))
    assert np.linalg.eigvalsh(P.values).min() > -1e-12


def test_phi_zero_for_zero_control():
    data = random_problem(np.random.default_rng(5), 2, 1, 1, 2)
    grid = TimeGrid(1.0, 40)
    fol = solve_follower(data, grid)
    phi = solve_phi(fol.P, MatrixPath.from_vectors(grid, np.zeros((41, 1))), data, grid)
    assert np.abs(phi.values).max() == 0.0


def test_phi_linear_in_w():
    data = random_problem(np.random.default_rng(6), 2, 1, 2, 1)
    grid = TimeGrid(1.0, 60)
    fol = solve_follower(data, grid)
    w1 = MatrixPath.from_vectors(grid, np.c_[np.sin(grid.nodes), grid.nodes])
    w2 = MatrixPath.from_vectors(grid, np.c_[np.ones(61), -grid.nodes ** 2])
    f = lambda w: solve_phi(fol.P, w, data, grid, fol.tilde).values
    combo = MatrixPath(grid, 2 * w1.values - 3 * w2.values)
    np.testing.assert_allclose(f(combo), 2 * f(w1) - 3 * f(w2), atol=1e-12)


def test_gains_reproduce_feedback():
    data = random_problem(np.random.default_rng(7), 2, 2, 1, 2)
    grid = TimeGrid(1.0, 20)
    fol = solve_follower(data, grid)
    Kx, Kw, Kp = follower_gains(fol.P, data)
    P0 = fol.P.values[0]
    R = data.R1 + sum(D.T @ P0 @ D for D in data.D1)
    L = data.B1.T @ P0 + sum(D.T @ P0 @ C for D, C in zip(data.D1, data.C)) + data.S1
    np.testing.assert_allclose(Kx.values[0], -np.linalg.solve(R, L), atol=1e-12)
    np.testing.assert_allclose(Kp.values[0], -np.linalg.solve(R, data.B1.T), atol=1e-12)
    x = np.ones((3, 21, 2))
    u = fol.control(x, np.zeros((21, 1)), np.zeros((21, 2)))
    np.testing.assert_allclose(u[1, 0], Kx.values[0] @ np.ones(2))


@pytest.mark.parametrize("seed", [0, 3])
def test_value_formula_against_moment_oracle(seed):
    data = random_problem(np.random.default_rng(seed), 2, 1, 1, 2)
    errs = []
    for n in (200, 400):
        grid = TimeGrid(1.0, n)
        fol = solve_follower(data, grid)
        w = MatrixPath.from_vectors(grid, np.cos(3 * grid.nodes)[:, None] - 0.5)
        J1, _, phi = exact_costs(data, fol, w)
        errs.append(abs(J1 - follower_value(fol.P, phi, w, data)))
    assert errs[1] < 1e-3
    assert errs[1] < 0.35 * errs[0] or errs[1] < 1e-10


def test_value_zero_control_is_quadratic_form():
    data = random_problem(np.random.default_rng(8), 2, 1, 1, 1)
    grid = TimeGrid(1.0, 50)
    fol = solve_follower(data, grid)
    w = MatrixPath.from_vectors(grid, np.zeros((51, 1)))
    phi = solve_phi(fol.P, w, data, grid)
    v = follower_value(fol.P, phi, w, data)
    assert v == pytest.approx(0.5 * data.x0 @ fol.P.values[0] @ data.x0, abs=1e-14)


def test_reconstruct_adjoint_example():
    # with D1 = 0 the stationarity condition is R1 u + S1 x - B1^T q = 0
    data = tanh_problem()
    grid = TimeGrid(1.0, 10)
    fol = solve_follower(data, grid)
    w = np.zeros((11, 1))
    phi = MatrixPath.from_vectors(grid, np.zeros((11, 1)))
    x = np.ones((1, 11, 1))
    u = fol.control(x, w, phi.vec)
    adj = reconstruct_adjoint(fol.P, phi, x, u, w, data)
    np.testing.assert_allclose(adj.q[0, :, 0], -fol.P.values[:, 0, 0])
    assert follower_stationarity_residual(adj, x, u, data, grid) < 1e-15
    bumped = u + 1.0
    assert follower_stationarity_residual(adj, x, bumped, data, grid) == pytest.approx(1.0)


def test_stationarity_along_random_paths():
    data, grid, fol, lead = solved("matrix_n3")
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, grid.steps + 1, 3))
    w = lead.w_star.vec
    u = fol.control(x, w, lead.bvp.phi_star.vec)
    adj = reconstruct_adjoint(fol.P, lead.bvp.phi_star, x, u, w, data)
    assert follower_stationarity_residual(adj, x, u, data, grid, relative=True) < 1e-12


def test_follower_timing_budget():
    data = tanh_problem()
    grid = TimeGrid(1.0, 1000)
    solve_riccati_P(data, grid)
    t0 = time.perf_counter()
    solve_riccati_P(data, grid)
    assert time.perf_counter() - t0 < 0.1
