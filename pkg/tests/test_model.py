import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_problem
from stackelberg_lq.config import DEFAULT_TOLERANCES, Tolerances
from stackelberg_lq.errors import IllConditioned, NotSymmetric, ShapeMismatch
from stackelberg_lq.model import (Dims, ProblemData, build_tilde, schur_complement,
                                  validate_assumptions)
from stackelberg_lq.numerics import MatrixPath, TimeGrid


def scalar(**over):
    z, o = [[0.0]], [[1.0]]
    kw = dict(A=z, B1=o, B2=o, C=[z], D1=[z], D2=[z], Q1=o, Q2=o, S1=z, S2=z,
              R1=o, R2=o, G1=z, G2=z)
    kw.update(over)
    return ProblemData(Dims(1, 1, 1, 1), 1.0, [1.0], **kw)


def test_dims_validation():
    with pytest.raises(ShapeMismatch):
        Dims(0, 1, 1, 1)
    with pytest.raises(ShapeMismatch):
        Dims(1, 1.5, 1, 1)


def test_problem_data_validation():
    with pytest.raises(ShapeMismatch):
        ProblemData(Dims(2, 1, 1, 1), 1.0, [1.0], **{k: v for k, v in scalar().__dict__.items()
                                                     if k not in ("dims", "horizon", "x0", "_cache")})
    with pytest.raises(ShapeMismatch):
        scalar(C=[[[0.0]], [[0.0]]])
    with pytest.raises(NotSymmetric):
        ProblemData(Dims(2, 1, 1, 1), 1.0, [1, 1], A=np.zeros((2, 2)), B1=np.ones((2, 1)),
                    B2=np.ones((2, 1)), C=[np.zeros((2, 2))], D1=[np.zeros((2, 1))],
                    D2=[np.zeros((2, 1))], Q1=np.eye(2), Q2=np.eye(2), S1=np.zeros((1, 2)),
                    S2=np.zeros((1, 2)), R1=[[1.0]], R2=[[1.0]], G1=[[0, 1], [0, 0]],
                    G2=np.eye(2))
    with pytest.raises(ShapeMismatch):
        scalar(A=[[1.0, 2.0]]).on_grid(TimeGrid(1.0, 4))
    with pytest.raises(ShapeMismatch):
        scalar().on_grid(TimeGrid(2.0, 4))
    with pytest.raises(NotSymmetric):
        ProblemData(Dims(2, 1, 1, 1), 1.0, [1, 1], A=np.zeros((2, 2)), B1=np.ones((2, 1)),
                    B2=np.ones((2, 1)), C=[np.zeros((2, 2))], D1=[np.zeros((2, 1))],
                    D2=[np.zeros((2, 1))], Q1=[[1, 1], [0, 1]], Q2=np.eye(2),
                    S1=np.zeros((1, 2)), S2=np.zeros((1, 2)), R1=[[1.0]], R2=[[1.0]],
                    G1=np.eye(2), G2=np.eye(2)).on_grid(TimeGrid(1.0, 2))


def test_time_varying_coefficients():
    g = TimeGrid(1.0, 4)
    nodes = np.arange(5.0).reshape(5, 1, 1)
    d1 = scalar(A=nodes).on_grid(g)
    np.testing.assert_allclose(d1.A[:, 0, 0], np.arange(9) / 2)
    d2 = scalar(A=lambda t: [[t * t]]).on_grid(g)
    np.testing.assert_allclose(d2.A[:, 0, 0], g.half_nodes ** 2)
    with pytest.raises(ShapeMismatch):
        scalar(A=np.zeros((3, 1, 1))).on_grid(g)


def test_on_grid_is_cached():
    data = scalar()
    g = TimeGrid(1.0, 3)
    assert data.on_grid(g) is data.on_grid(TimeGrid(1.0, 3))


def test_schur_complement_rectangular():
    Q = np.eye(3)[None]
    S = np.ones((1, 2, 3))
    R = 4 * np.eye(2)[None]
    out = schur_complement(Q, S, R)
    np.testing.assert_allclose(out[0], np.eye(3) - 0.5 * np.ones((3, 3)))


def test_validate_assumptions_pass_and_fail():
    g = TimeGrid(1.0, 10)
    rep = validate_assumptions(scalar(), g)
    assert rep.passed and rep.a22_R1_min_eig == 1.0
    bad = validate_assumptions(scalar(R1=[[0.0]]), g)
    assert not bad.passed
    assert bad.failures[0].message.startswith("A2.2: R1 not uniformly positive")
    assert bad.a22_schur_min_eig is None
    bad2 = validate_assumptions(scalar(Q2=[[0.1]], S2=[[1.0]]), g)
    assert bad2.failures[0].assumption == "A2.3"
    bad3 = validate_assumptions(scalar(G2=[[-1.0]]), g)
    assert "G2 not positive semidefinite" in bad3.failures[0].message
    d = bad.as_dict()
    assert d["passed"] is False and d["flags"]["A2.2"] is False


def test_tolerances_update():
    t = DEFAULT_TOLERANCES.updated({"det_floor": 1e-6})
    assert t.det_floor == 1e-6 and t.pd_floor == Tolerances().pd_floor
    with pytest.raises(ValueError):
        DEFAULT_TOLERANCES.updated({"nope": 1})
    assert DEFAULT_TOLERANCES.updated(None) is DEFAULT_TOLERANCES


def test_tilde_at_zero_P():
    # with P = 0 the tilde coefficients reduce to plain feedback algebra
    rng = np.random.default_rng(1)
    data = random_problem(rng, n=2, k1=2, k2=1, d=2)
    g = TimeGrid(1.0, 3)
    t = build_tilde(MatrixPath(g, np.zeros((4, 2, 2))), data)
    Ri = np.linalg.inv(data.R1)
    np.testing.assert_allclose(t.A[0], data.A - data.B1 @ Ri @ data.S1, atol=1e-14)
    np.testing.assert_allclose(t.B1[0], -data.B1 @ Ri @ data.B1.T, atol=1e-14)
    np.testing.assert_allclose(t.B2[0], data.B2, atol=1e-14)
    np.testing.assert_allclose(t.Gamma[0], 0.0, atol=1e-14)


def test_tilde_singular_R1_reports_time():
    g = TimeGrid(1.0, 4)
    data = scalar(R1=[[0.0]], D1=[[[0.0]]])
    with pytest.raises(IllConditioned) as err:
        build_tilde(MatrixPath(g, np.zeros((5, 1, 1))), data)
    assert err.value.time == 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 3), k1=st.integers(1, 2),
       k2=st.integers(1, 2), d=st.integers(1, 2))
def test_tilde_identities(seed, n, k1, k2, d):
    """Closed-loop substitution identities hold for any symmetric P."""
    rng = np.random.default_rng(seed)
    data = random_problem(rng, n, k1, k2, d)
    g = TimeGrid(1.0, 2)
    M = rng.standard_normal((n, n))
    P = np.broadcast_to(M @ M.T, (3, n, n))
    t = build_tilde(MatrixPath(g, P), data)
    Pm = P[0]
    Kx = -np.linalg.solve(t.R1t[0], t.L[0])
    np.testing.assert_allclose(t.A[0], data.A + data.B1 @ Kx, atol=1e-12)
    for j in range(d):
        np.testing.assert_allclose(t.C[0, j], data.C[j] + data.D1[j] @ Kx, atol=1e-12)
    np.testing.assert_allclose(t.B1[0], t.B1[0].T, atol=1e-12)
    # B1~ is negative semidefinite
    assert np.linalg.eigvalsh(t.B1[0]).max() <= 1e-12
    gam = Pm @ data.B2 + sum(data.C[j].T @ Pm @ data.D2[j] for j in range(d)) \
        - t.L[0].T @ np.linalg.solve(t.R1t[0], t.N12[0])
    np.testing.assert_allclose(t.Gamma[0], gam, atol=1e-12)
