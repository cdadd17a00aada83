import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SHIPPED, solved
from oracles import (leader_directional_derivative, random_problem, scalar_curly_a,
                     scipy_leader_riccati)
from stackelberg_lq.config import DEFAULT_TOLERANCES
from stackelberg_lq.errors import SolverInfeasible
from stackelberg_lq.follower import solve_follower
from stackelberg_lq.leader import (BVPSystem, analytic_means, assemble_bvp, check_det_condition,
                                   leader_stationarity_residual, solve_bvp, solve_leader,
                                   solve_leader_riccati)
from stackelberg_lq.numerics import MatrixPath, TimeGrid


@pytest.mark.parametrize("seed,n,k1,k2,d", [(0, 2, 1, 1, 2), (1, 3, 2, 2, 2), (2, 1, 1, 1, 1)])
def test_leader_riccati_matches_scipy(seed, n, k1, k2, d):
    data = random_problem(np.random.default_rng(seed), n, k1, k2, d)
    grid = TimeGrid(1.0, 200)
    fol = solve_follower(data, grid)
    ric = solve_leader_riccati(fol.tilde, data, grid)
    P, P1, P2, calP = scipy_leader_riccati(data, grid.nodes)
    assert np.abs(fol.P.values - P).max() < 1e-9
    assert np.abs(ric.calP.values - calP).max() < 1e-8
    assert np.abs(ric.P1.values - P1).max() < 1e-8
    assert np.abs(ric.P2.values - P2).max() < 1e-8
    # the Lyapunov solution is the sum of the coupled pair
    assert np.abs(calP - P1 - P2).max() < 1e-9


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 3), d=st.integers(1, 2))
def test_decoupling_cross_check(seed, n, d):
    data = random_problem(np.random.default_rng(seed), n, 1, 1, d)
    grid = TimeGrid(1.0, 100)
    fol = solve_follower(data, grid)
    ric = solve_leader_riccati(fol.tilde, data, grid)
    assert ric.coupled_deviation < 1e-7
    np.testing.assert_allclose(ric.P2.values, ric.P2.values.swapaxes(1, 2), atol=1e-12)
    assert np.abs(ric.P2.values[-1]).max() == 0.0


def test_scalar_blocks_match_hand_transcription():
    data, grid, fol, lead = solved("full_scalar")
    ric = lead.riccati
    curly = lead.system.curlyA.values
    for i in (0, grid.steps // 3, grid.steps):
        ref = scalar_curly_a(fol.P.values[i, 0, 0], ric.P1.values[i, 0, 0],
                             ric.P2.values[i, 0, 0], data)
        np.testing.assert_allclose(curly[i], ref, atol=1e-12)


@pytest.mark.parametrize("name", SHIPPED)
def test_bvp_terminal_and_det(name):
    data, grid, fol, lead = solved(name)
    assert lead.bvp.terminal_residual <= 1e-8 * (1 + np.linalg.norm(data.x0))
    assert lead.det_min > 1e-8
    assert np.abs(lead.bvp.phi.values[-1]).max() < 1e-8
    assert np.abs(lead.bvp.Ep.values[0]).max() == 0.0
    np.testing.assert_allclose(lead.bvp.Ex.vec[0], data.x0)


@pytest.mark.parametrize("name", ["desk_scalar", "matrix_n3"])
def test_bvp_grid_refinement(name):
    _, _, _, coarse = solved(name)
    _, _, _, fine = solved(name, 2 * 500)
    assert np.abs(coarse.bvp.Y0 - fine.bvp.Y0).max() <= 1e-6


def test_det_condition_failure_raises():
    data, grid, fol, lead = solved("desk_scalar")
    sys_ = lead.system
    bad_phi = MatrixPath(grid, sys_.Phi.values * np.r_[1, 1, 0, 0][None, None, :])
    broken = BVPSystem(grid, sys_.blockA, sys_.blockB, sys_.blockAhat, sys_.blockBhat,
                       sys_.curlyA, bad_phi)
    assert check_det_condition(broken) == 0.0
    with pytest.raises(SolverInfeasible) as err:
        solve_bvp(broken, data.x0, DEFAULT_TOLERANCES)
    assert err.value.det_min == 0.0


def test_x0_zero_gives_zero_solution():
    data = random_problem(np.random.default_rng(3), 2, 1, 1, 2, x0=np.zeros(2))
    grid = TimeGrid(1.0, 50)
    lead = solve_leader(data, solve_follower(data, grid))
    for path in (lead.bvp.Ex, lead.bvp.Ep, lead.bvp.phi_star, lead.bvp.phi, lead.w_star):
        assert np.abs(path.values).max() == 0.0


def test_zero_coupling_leader_control_vanishes():
    _, _, _, lead = solved("zero_coupling")
    assert np.abs(lead.w_star.values).max() == 0.0


@pytest.mark.parametrize("name", ["desk_scalar", "full_scalar", "matrix_n3"])
def test_analytic_stationarity(name):
    data, grid, fol, lead = solved(name)
    means = analytic_means(lead, fol.tilde)
    res = leader_stationarity_residual(lead, means, data, fol.tilde)
    scale = max(np.abs(lead.w_star.values).max(), 1.0)
    assert res / scale < 1e-6
    np.testing.assert_allclose(means[2], lead.bvp.Ex.vec)


@pytest.mark.parametrize("seed", [3, 11])
def test_exact_gradient_vanishes_at_w_star(seed):
    """Moment-ODE oracle: dJ2/deps at w* is ~0, with positive curvature."""
    data = random_problem(np.random.default_rng(seed), 2, 1, 1, 2)
    grads = []
    for n in (200, 400):
        grid = TimeGrid(1.0, n)
        fol = solve_follower(data, grid)
        lead = solve_leader(data, fol)
        t = grid.nodes
        g, curv = leader_directional_derivative(data, fol, lead.w_star, np.sin(np.pi * t)[:, None])
        grads.append(abs(g))
        assert curv > 0
    assert grads[1] < 1e-5
    assert grads[1] < 0.5 * grads[0] or grads[1] < 1e-9


def test_mean_state_satisfies_its_ode():
    """E x* from the boundary value problem solves dEx = (A~ Ex + B1~ phi* + B2~ w*) dt."""
    data, grid, fol, lead = solved("matrix_n3")
    t = fol.tilde
    Ex, ps, w = lead.bvp.Ex.vec, lead.bvp.phi_star.vec, lead.w_star.vec
    rhs = (np.einsum("tab,tb->ta", t.A[0::2], Ex) + np.einsum("tab,tb->ta", t.B1[0::2], ps)
           + np.einsum("tab,tb->ta", t.B2[0::2], w))
    fd = (Ex[2:] - Ex[:-2]) / (2 * grid.dt)
    assert np.abs(fd - rhs[1:-1]).max() < 1e-4


def test_assemble_bvp_shapes():
    data, grid, fol, lead = solved("matrix_n3")
    sys_ = assemble_bvp(fol.tilde, lead.bar, grid)
    assert sys_.curlyA.values.shape == (grid.steps + 1, 12, 12)
    np.testing.assert_allclose(sys_.Phi.values[0], np.eye(12))
