import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from stackelberg_lq.errors import IllConditioned, NonFinite, NotSymmetric, ShapeMismatch
from stackelberg_lq.numerics import (MatrixPath, TimeGrid, enforce_symmetry, min_eigenvalue,
                                     rcond, rk4_integrate, solve_linear, transition_matrix,
                                     trapezoid)


def test_grid_basics():
    g = TimeGrid(2.0, 4)
    assert g.dt == 0.5
    np.testing.assert_allclose(g.nodes, [0, 0.5, 1, 1.5, 2])
    np.testing.assert_allclose(g.mids, [0.25, 0.75, 1.25, 1.75])
    assert len(g.half_nodes) == 9
    assert g.half_index(0.75) == 3
    assert g.half_index(5.0) == 8
    assert g.refined().steps == 8


@pytest.mark.parametrize("horizon,steps", [(0.0, 10), (-1.0, 10), (1.0, 0), (1.0, 2.5),
                                           (float("inf"), 3)])
def test_grid_rejects_bad_input(horizon, steps):
    with pytest.raises(ValueError):
        TimeGrid(horizon, steps)


def test_matrix_path_validation_and_half():
    g = TimeGrid(1.0, 2)
    with pytest.raises(ShapeMismatch):
        MatrixPath(g, np.zeros((2, 1, 1)))
    with pytest.raises(NonFinite):
        MatrixPath(g, np.full((3, 1, 1), np.nan))
    p = MatrixPath(g, np.arange(3.0).reshape(3, 1, 1))
    np.testing.assert_allclose(p.half()[:, 0, 0], [0, 0.5, 1, 1.5, 2])
    q = MatrixPath.from_half(g, p.half())
    np.testing.assert_array_equal(q.values, p.values)
    assert (p + q).values[2, 0, 0] == 4.0
    assert (p - q).values.max() == 0.0
    c = MatrixPath.constant(g, [[1.0, 2.0]])
    assert c.values.shape == (3, 1, 2) and c.mid.shape == (2, 1, 2)
    with pytest.raises(ShapeMismatch):
        c.vec


def test_rk4_fourth_order_on_time_varying_ode():
    # y' = -2 t y, y(0) = 1 -> exp(-t^2)
    def field(t, y):
        return -2.0 * t * y

    errs = []
    for n in (20, 40, 80):
        g = TimeGrid(1.0, n)
        y = rk4_integrate(field, [[1.0]], "forward", g)
        errs.append(abs(y.values[-1, 0, 0] - np.exp(-1.0)))
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(rates > 3.8)


def test_rk4_backward_and_hermite_midpoints():
    g = TimeGrid(1.0, 50)
    y = rk4_integrate(lambda t, y: -y, [[1.0]], "backward", g, midpoints=True)
    exact = np.exp(1.0 - g.nodes)
    np.testing.assert_allclose(y.values[:, 0, 0], exact, rtol=5e-9)
    np.testing.assert_allclose(y.mid[:, 0, 0], np.exp(1.0 - g.mids), rtol=1e-7)


def test_rk4_errors():
    g = TimeGrid(1.0, 5)
    with pytest.raises(ValueError):
        rk4_integrate(lambda t, y: y, [[1.0]], "sideways", g)
    with pytest.raises(ShapeMismatch):
        rk4_integrate(lambda t, y: np.zeros((2, 2)), [[1.0]], "forward", g)
    with pytest.raises(NonFinite), np.errstate(over="ignore", invalid="ignore"):
        rk4_integrate(lambda t, y: y ** 2 * 1e200, [[1e200]], "forward", g)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=4, max_size=4))
def test_transition_matrix_matches_expm(entries):
    a = np.array(entries).reshape(2, 2)
    g = TimeGrid(1.0, 100)
    phi = transition_matrix(MatrixPath.constant(g, a), g)
    np.testing.assert_allclose(phi.values[-1], expm(a), atol=1e-8)


def test_transition_matrix_liouville():
    # det Phi(t) = exp(int_0^t tr A)
    g = TimeGrid(1.0, 200)
    a = np.array([[0.3, 1.0], [-0.5, 0.2]])
    phi = transition_matrix(MatrixPath.constant(g, a), g)
    np.testing.assert_allclose(np.linalg.det(phi.values), np.exp(0.5 * g.nodes), rtol=1e-10)


def test_guarded_linear_algebra():
    assert rcond(np.eye(3)) == 1.0
    assert rcond(np.zeros((2, 2))) == 0.0
    with pytest.raises(IllConditioned):
        solve_linear(np.array([[1.0, 1.0], [1.0, 1.0 + 1e-14]]), np.ones(2))
    with pytest.raises(ShapeMismatch):
        solve_linear(np.ones((2, 3)), np.ones(2))
    np.testing.assert_allclose(solve_linear(2 * np.eye(2), np.ones(2)), [0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=9, max_size=9))
def test_symmetry_helpers(entries):
    m = np.array(entries).reshape(3, 3)
    s = enforce_symmetry(m)
    np.testing.assert_array_equal(s, s.T)
    lam = min_eigenvalue(s)
    assert lam <= np.diag(s).min() + 1e-9


def test_min_eigenvalue_rejects_asymmetric():
    with pytest.raises(NotSymmetric):
        min_eigenvalue([[1.0, 2.0], [0.0, 1.0]])


def test_trapezoid_exact_for_linear():
    g = TimeGrid(2.0, 7)
    assert trapezoid(3 * g.nodes + 1, g.dt) == pytest.approx(8.0)
