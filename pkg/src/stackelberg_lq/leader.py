"""The leader's problem.

The coupled Riccati pair for ``(P1, P2)`` is decoupled through its sum,
which satisfies a linear Lyapunov equation; ``P1`` then solves a standard
Riccati equation and ``P2`` is the difference.  The means ``(E x*, E p)``
and the affine terms ``(phi*, phi)`` solve a linear two-point boundary
value problem, handled here with the fundamental matrix of the 4n system.

The mean adjoint ``E p`` is dual to the follower's affine term ``phi``,
which runs with ``-A~^T``; ``E p`` therefore runs with ``+A~`` (the two only
coincide for symmetric ``A~``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import DEFAULT_TOLERANCES, Tolerances
from .errors import IllConditioned, SolverInfeasible
from .follower import FollowerSolution
from .model import (AssumptionReport, BarCoefficients, ProblemData, TildeCoefficients,
                    build_bar, leader_weights, schur_complement)
from .numerics import (MatrixPath, TimeGrid, enforce_symmetry, rk4_integrate, solve_linear,
                       transition_matrix)


def _T(m):
    return m.swapaxes(-1, -2)


def _chan_stack(F):
    """Per-channel stack ``(K, d, n, c)`` -> helpers for ``sum_j F_j^T X F_j``."""
    K, d, n, c = F.shape
    Fh = np.ascontiguousarray(F.transpose(0, 2, 1, 3).reshape(K, n, d * c))
    FvT = np.ascontiguousarray(F.reshape(K, d * n, c).swapaxes(1, 2))
    return Fh, FvT, d, c


def _quad_field(Fh, FvT, d, c, k, X):
    n = X.shape[0]
    Y = (X @ Fh[k]).reshape(n, d, c).transpose(1, 0, 2).reshape(d * n, c)
    return FvT[k] @ Y


def solve_calP(tilde: TildeCoefficients, data: ProblemData, grid: TimeGrid) -> MatrixPath:
    """Backward RK4 for the Lyapunov equation of ``P1 + P2`` from ``G2``."""
    g = data.on_grid(grid)
    At = tilde.A
    AtT = np.ascontiguousarray(_T(At))
    Ch, CvT, d, c = _chan_stack(tilde.C)
    Q2 = g.Q2

    def field(t, X):
        k = grid.half_index(t)
        XA = X @ At[k]
        return -(XA + AtT[k] @ X + _quad_field(Ch, CvT, d, c, k, X) + Q2[k])

    return rk4_integrate(field, data.G2, "backward", grid, project=enforce_symmetry,
                         midpoints=True)


def p1_weights(calP: MatrixPath, tilde: TildeCoefficients, data: ProblemData,
               rcond_floor: float = 1e-10):
    """``(R2~, Q2~, S2~, R2~^{-1}, min rcond)`` on the half grid."""
    return leader_weights(calP.half(), tilde, data.on_grid(calP.grid), rcond_floor)


def solve_P1(calP: MatrixPath, tilde: TildeCoefficients, data: ProblemData, grid: TimeGrid,
             rcond_floor: float = 1e-10) -> MatrixPath:
    """Backward RK4 for the decoupled Riccati equation of ``P1`` from ``G2``."""
    _, Q2t, S2t, R2inv, _ = p1_weights(calP, tilde, data, rcond_floor)
    At, B2t = tilde.A, tilde.B2
    AtT = np.ascontiguousarray(_T(At))
    S2tT = np.ascontiguousarray(_T(S2t))

    def field(t, X):
        k = grid.half_index(t)
        K = X @ B2t[k] + S2tT[k]
        XA = X @ At[k]
        return -(XA + AtT[k] @ X - K @ R2inv[k] @ K.T + Q2t[k])

    return rk4_integrate(field, data.G2, "backward", grid, project=enforce_symmetry,
                         midpoints=True)


def compute_P2(calP: MatrixPath, P1: MatrixPath) -> MatrixPath:
    return calP - P1


def solve_coupled_riccati(tilde: TildeCoefficients, data: ProblemData, grid: TimeGrid):
    """Integrate the original coupled ``(P1, P2)`` pair as one backward system.

    Used as an independent check of the decoupled construction.
    """
    g = data.on_grid(grid)
    n = data.dims.n
    At, B2t = tilde.A, tilde.B2
    AtT = np.ascontiguousarray(_T(At))
    Ch, CvT, d, c = _chan_stack(tilde.C)
    CD = np.concatenate([tilde.C, tilde.D2], axis=3)
    CDh, CDvT, _, m = _chan_stack(CD)
    S2T = np.ascontiguousarray(_T(g.S2))
    R2, Q2 = g.R2, g.Q2

    def field(t, X):
        k = grid.half_index(t)
        P1, P2 = X[:n], X[n:]
        Pi = P1 + P2
        M = _quad_field(CDh, CDvT, d, m, k, Pi)     # [C~ D2~]^T Pi [C~ D2~]
        K = P1 @ B2t[k] + M[:n, n:] + S2T[k]
        R2t = R2[k] + M[n:, n:]
        KRK = K @ np.linalg.solve(R2t, K.T)
        d1 = -(P1 @ At[k] + AtT[k] @ P1 + M[:n, :n] - KRK + Q2[k])
        d2 = -(P2 @ At[k] + AtT[k] @ P2 + KRK)
        return np.vstack([d1, d2])

    def project(X):
        return np.vstack([enforce_symmetry(X[:n]), enforce_symmetry(X[n:])])

    boundary = np.vstack([data.G2, np.zeros((n, n))])
    path = rk4_integrate(field, boundary, "backward", grid, project=project)
    return (MatrixPath(grid, path.values[:, :n]), MatrixPath(grid, path.values[:, n:]))


@dataclass
class LeaderRiccati:
    calP: MatrixPath
    P1: MatrixPath
    P2: MatrixPath
    bar: BarCoefficients
    coupled_deviation: Optional[float] = None
    a24_min_rcond: Optional[float] = None
    a25_schur_min_eig: Optional[float] = None
    a25_time: Optional[float] = None


def solve_leader_riccati(tilde: TildeCoefficients, data: ProblemData, grid: TimeGrid,
                         rcond_floor: float = 1e-10, cross_check: bool = True) -> LeaderRiccati:
    calP = solve_calP(tilde, data, grid)
    R2t, Q2t, S2t, R2inv, rc = p1_weights(calP, tilde, data, rcond_floor)
    schur = schur_complement(Q2t[0::2], S2t[0::2], R2t[0::2])
    ev = np.linalg.eigvalsh(schur)[:, 0]
    i = int(np.argmin(ev))
    P1 = solve_P1(calP, tilde, data, grid, rcond_floor)
    P2 = compute_P2(calP, P1)
    bar = build_bar(P1, P2, tilde, data, rcond_floor)
    dev = None
    if cross_check:
        P1c, P2c = solve_coupled_riccati(tilde, data, grid)
        dev = float(max(np.abs(P1c.values - P1.values).max(),
                        np.abs(P2c.values - P2.values).max()))
    return LeaderRiccati(calP, P1, P2, bar, dev, rc, float(ev[i]), float(grid.nodes[i]))


@dataclass
class BVPSystem:
    grid: TimeGrid
    blockA: np.ndarray       # half grid, (K, 2n, 2n)
    blockB: np.ndarray
    blockAhat: np.ndarray
    blockBhat: np.ndarray
    curlyA: MatrixPath
    Phi: MatrixPath


def assemble_bvp(tilde: TildeCoefficients, bar: BarCoefficients, grid: TimeGrid) -> BVPSystem:
    """Block matrices of the linear system for ``X = (E x*, E p)``, ``Y = (phi*, phi)``."""
    W = bar.R2inv
    At, B2t, Gam = tilde.A, tilde.B2, tilde.Gamma
    AtT = _T(At)
    S2b, G2b = bar.S2bar, bar.Gammabar
    B2tW = B2t @ W
    GamW = Gam @ W
    S2bTW = _T(S2b) @ W
    zero = np.zeros_like(At)

    blockA = np.block([[At - B2tW @ S2b, -B2tW @ _T(Gam)],
                       [_T(bar.B1bar), At - _T(G2b)]])
    blockB = np.block([[bar.B2bar, -B2tW @ _T(B2t)],
                       [bar.D1bar, _T(bar.B2bar)]])
    blockAhat = np.block([[GamW @ S2b, GamW @ _T(Gam)],
                          [zero, S2bTW @ _T(Gam)]])
    blockBhat = np.block([[G2b - AtT, GamW @ _T(B2t)],
                          [-bar.B1bar, -AtT + S2bTW @ _T(B2t)]])
    curly = np.block([[blockA, blockB], [blockAhat, blockBhat]])
    curlyA = MatrixPath.from_half(grid, curly)
    Phi = transition_matrix(curlyA, grid)
    return BVPSystem(grid, blockA, blockB, blockAhat, blockBhat, curlyA, Phi)


def check_det_condition(system: BVPSystem) -> float:
    """Minimum over nodes of ``det`` of the lower-right ``2n x 2n`` block of ``Phi(t)``."""
    m = system.Phi.rows // 2
    return float(np.linalg.det(system.Phi.values[:, m:, m:]).min())


@dataclass
class BVPSolution:
    Ex: MatrixPath
    Ep: MatrixPath
    phi_star: MatrixPath
    phi: MatrixPath
    Y0: np.ndarray
    terminal_residual: float


def solve_bvp(system: BVPSystem, x0, tolerances: Tolerances = DEFAULT_TOLERANCES) -> BVPSolution:
    """Fundamental-matrix solve with ``X_0 = (x0, 0)`` and ``Y_T = 0``."""
    grid = system.grid
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n = x0.size
    m = 2 * n
    det_min = check_det_condition(system)
    if not det_min > tolerances.det_floor:
        raise SolverInfeasible(
            f"boundary value problem not solvable: min det of Phi22 = {det_min:.3e}",
            det_min=det_min)
    Phi_T = system.Phi.values[-1]
    X0 = np.concatenate([x0, np.zeros(n)])
    try:
        Y0 = solve_linear(Phi_T[m:, m:], -Phi_T[m:, :m] @ X0, tolerances.rcond_floor)
    except IllConditioned as exc:
        raise SolverInfeasible(f"Phi22(T) is ill conditioned: {exc}", det_min=det_min) from exc
    Z0 = np.concatenate([X0, Y0])
    Z = system.Phi.values @ Z0
    # Hermite midpoints from dZ/dt = A Z keep the solution fourth-order at half nodes
    curly = system.curlyA.values
    dZ = np.einsum("tab,tb->ta", curly, Z)
    h = grid.dt
    Zmid = 0.5 * (Z[:-1] + Z[1:]) + (h / 8.0) * (dZ[:-1] - dZ[1:])

    def part(j):
        sl = slice(j * n, (j + 1) * n)
        return MatrixPath.from_vectors(grid, Z[:, sl], Zmid[:, sl])

    res = float(np.linalg.norm(Z[-1, m:]))
    return BVPSolution(part(0), part(1), part(2), part(3), Y0, res)


@dataclass
class LeaderSolution:
    riccati: LeaderRiccati
    system: BVPSystem
    bvp: BVPSolution
    w_star: MatrixPath
    L_Ex: MatrixPath
    L_phiStar: MatrixPath
    L_Ep: MatrixPath
    L_phi: MatrixPath
    det_min: float

    @property
    def bar(self):
        return self.riccati.bar


def leader_control(riccati: LeaderRiccati, bvp: BVPSolution, tilde: TildeCoefficients,
                   bar: BarCoefficients, system: Optional[BVPSystem] = None,
                   det_min: Optional[float] = None) -> LeaderSolution:
    """Deterministic optimal leader control and its gain decomposition."""
    grid = riccati.P1.grid
    W = bar.R2inv
    L_Ex = -W @ bar.S2bar
    L_phiStar = -W @ bar.N21
    L_Ep = -W @ _T(tilde.Gamma)
    L_phi = -W @ _T(tilde.B2)
    w = (L_Ex @ bvp.Ex.half() + L_phiStar @ bvp.phi_star.half()
         + L_Ep @ bvp.Ep.half() + L_phi @ bvp.phi.half())
    gains = [MatrixPath.from_half(grid, G) for G in (L_Ex, L_phiStar, L_Ep, L_phi)]
    return LeaderSolution(riccati, system, bvp, MatrixPath.from_half(grid, w), *gains,
                          det_min=det_min)


def solve_leader(data: ProblemData, follower: FollowerSolution,
                 tolerances: Tolerances = DEFAULT_TOLERANCES,
                 report: Optional[AssumptionReport] = None) -> LeaderSolution:
    """Full leader pipeline: Riccati system, BVP and optimal control."""
    grid = follower.grid
    tilde = follower.tilde
    ric = solve_leader_riccati(tilde, data, grid, tolerances.rcond_floor)
    if report is not None:
        report.a24_min_rcond = ric.a24_min_rcond
        report.a25_schur_min_eig = ric.a25_schur_min_eig
    system = assemble_bvp(tilde, ric.bar, grid)
    det_min = check_det_condition(system)
    if report is not None:
        report.det_condition_min = det_min
    bvp = solve_bvp(system, data.x0, tolerances)
    return leader_control(ric, bvp, tilde, ric.bar, system, det_min)


def analytic_means(leader: LeaderSolution, tilde: TildeCoefficients):
    """Means of ``(y, z, x*, p)`` at the nodes implied by the feedback representation.

    Returns ``Ey (N+1, n)``, ``Ez (N+1, d, n)``, ``Ex (N+1, n)``, ``Ep (N+1, n)``.
    """
    bar = leader.bar
    P1 = bar.P1[0::2]
    Pi = bar.Pi[0::2]
    Ex, Ep = leader.bvp.Ex.vec, leader.bvp.Ep.vec
    ps, ph = leader.bvp.phi_star.vec, leader.bvp.phi.vec
    w = leader.w_star.vec
    Ey = np.einsum("tab,tb->ta", P1, Ex) + ph
    sig = (np.einsum("tjab,tb->tja", tilde.C[0::2], Ex)
           + np.einsum("tjab,tb->tja", tilde.D1[0::2], ps)
           + np.einsum("tjab,tb->tja", tilde.D2[0::2], w))
    Ez = np.einsum("tab,tjb->tja", Pi, sig)
    return Ey, Ez, Ex, Ep


def leader_stationarity_residual(leader: LeaderSolution, means, data: ProblemData,
                                 tilde: TildeCoefficients) -> float:
    """Sup over nodes of ``|R2 w* + B2~^T Ey + sum_j D2j~^T Ez^j + S2 Ex + Gamma^T Ep|``."""
    Ey, Ez, Ex, Ep = means
    g = data.on_grid(leader.w_star.grid)
    w = leader.w_star.vec
    r = (np.einsum("tab,tb->ta", g.nodes("R2"), w)
         + np.einsum("tba,tb->ta", tilde.B2[0::2], Ey)
         + np.einsum("tjba,tjb->ta", tilde.D2[0::2], Ez)
         + np.einsum("tab,tb->ta", g.nodes("S2"), Ex)
         + np.einsum("tba,tb->ta", tilde.Gamma[0::2], Ep))
    return float(np.linalg.norm(r, axis=-1).max())
