"""The follower's problem: Riccati equation, affine term, feedback law and value."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import IllConditioned, ShapeMismatch
from .model import ProblemData, TildeCoefficients, build_tilde
from .numerics import (DEFAULT_RCOND_FLOOR, MatrixPath, TimeGrid, enforce_symmetry,
                       rk4_integrate, trapezoid)


def riccati_P_field(data: ProblemData, grid: TimeGrid):
    """Right-hand side ``dP/dt`` of the follower's Riccati equation."""
    g = data.on_grid(grid)
    n, k1, d = data.dims.n, data.dims.k1, data.dims.d
    if n == 1 and k1 == 1:
        return _scalar_riccati_field(g, grid)
    m = n + k1
    # Z_j = [C_j | D1_j]; one stacked product gives sum_j Z_j^T P Z_j, whose
    # blocks are C^T P C, D1^T P C and D1^T P D1.
    Z = np.concatenate([g.C, g.D1], axis=3)                       # (K, d, n, m)
    Zh = np.ascontiguousarray(Z.transpose(0, 2, 1, 3).reshape(-1, n, d * m))
    ZvT = np.ascontiguousarray(Z.reshape(-1, d * n, m).swapaxes(1, 2))
    At = np.ascontiguousarray(g.A.swapaxes(1, 2))
    B1t = np.ascontiguousarray(g.B1.swapaxes(1, 2))
    Q1, S1, R1 = g.Q1, g.S1, g.R1
    scalar = k1 == 1

    def field(t, P):
        k = grid.half_index(t)
        Y = (P @ Zh[k]).reshape(n, d, m).transpose(1, 0, 2).reshape(d * n, m)
        M = ZvT[k] @ Y
        AtP = At[k] @ P
        L = B1t[k] @ P + M[n:, :n] + S1[k]
        R1t = R1[k] + M[n:, n:]
        if scalar:
            r = R1t[0, 0]
            if r == 0.0:
                raise IllConditioned(f"R1 + D1^T P D1 singular at t={t:.6g}", time=t)
            gain = L / r
        else:
            try:
                gain = np.linalg.solve(R1t, L)
            except np.linalg.LinAlgError as exc:
                raise IllConditioned(f"R1 + D1^T P D1 singular at t={t:.6g}", time=t) from exc
        return -(AtP + AtP.T + M[:n, :n] + Q1[k] - L.T @ gain)

    return field


def _scalar_riccati_field(g, grid: TimeGrid):
    # plain floats: numpy call overhead dominates for 1x1 matrices
    a = g.A[:, 0, 0].tolist()
    b = g.B1[:, 0, 0].tolist()
    cc = (g.C[:, :, 0, 0] ** 2).sum(axis=1).tolist()
    cd = (g.C[:, :, 0, 0] * g.D1[:, :, 0, 0]).sum(axis=1).tolist()
    dd = (g.D1[:, :, 0, 0] ** 2).sum(axis=1).tolist()
    q, s, r = g.Q1[:, 0, 0].tolist(), g.S1[:, 0, 0].tolist(), g.R1[:, 0, 0].tolist()
    two_over_dt = 2.0 / grid.dt
    top = 2 * grid.steps

    def field(t, P):
        k = min(max(int(round(t * two_over_dt)), 0), top)
        p = float(P[0, 0])
        rt = r[k] + dd[k] * p
        if rt == 0.0:
            raise IllConditioned(f"R1 + D1^T P D1 singular at t={t:.6g}", time=t)
        ell = (b[k] + cd[k]) * p + s[k]
        return np.array([[-((2.0 * a[k] + cc[k]) * p + q[k] - ell * ell / rt)]])

    return field


def solve_riccati_P(data: ProblemData, grid: TimeGrid) -> MatrixPath:
    """Backward RK4 solve of the follower Riccati equation from ``P_T = G1``."""
    return rk4_integrate(riccati_P_field(data, grid), data.G1, "backward", grid,
                         project=enforce_symmetry, midpoints=True)


def _half_vector(path: MatrixPath, what: str, size: int) -> np.ndarray:
    if path.cols != 1 or path.rows != size:
        raise ShapeMismatch(f"{what} must be a {size}-vector path, got {path.rows}x{path.cols}")
    return path.half()


def solve_phi(P: MatrixPath, w: MatrixPath, data: ProblemData, grid: TimeGrid,
              tilde: Optional[TildeCoefficients] = None) -> MatrixPath:
    """Affine term of the follower's adjoint for a given leader control ``w``.

    Solves ``dphi/dt = -(A~^T phi + Gamma w)`` backwards from ``phi_T = 0``.
    """
    if tilde is None:
        tilde = build_tilde(P, data)
    wh = _half_vector(w, "w", data.dims.k2)
    AtT = tilde.A.swapaxes(-1, -2)
    drive = tilde.Gamma @ wh

    def field(t, phi):
        k = grid.half_index(t)
        return -(AtT[k] @ phi + drive[k])

    return rk4_integrate(field, np.zeros((data.dims.n, 1)), "backward", grid, midpoints=True)


@dataclass
class FollowerSolution:
    P: MatrixPath
    K_x: MatrixPath
    K_w: MatrixPath
    K_phi: MatrixPath
    grid: TimeGrid
    tilde: TildeCoefficients

    def control(self, x, w, phi):
        """Feedback ``u = K_x x + K_w w + K_phi phi`` at every node.

        ``x`` has shape ``(..., N + 1, n)``; ``w`` and ``phi`` are node arrays
        ``(N + 1, k2)`` and ``(N + 1, n)``.
        """
        kx = self.K_x.values
        ff = (np.einsum("tij,tj->ti", self.K_w.values, w)
              + np.einsum("tij,tj->ti", self.K_phi.values, phi))
        return np.einsum("tij,...tj->...ti", kx, x) + ff


def follower_gains(P: MatrixPath, data: ProblemData,
                   tilde: Optional[TildeCoefficients] = None):
    """``(K_x, K_w, K_phi)`` such that ``u* = K_x x + K_w w + K_phi phi``."""
    if tilde is None:
        tilde = build_tilde(P, data)
    g = data.on_grid(P.grid)
    rhs = np.concatenate([tilde.L, tilde.N12, g.B1.swapaxes(-1, -2)], axis=2)
    sol = -np.linalg.solve(tilde.R1t, rhs)
    n, k2 = data.dims.n, data.dims.k2
    grid = P.grid
    return (MatrixPath.from_half(grid, sol[..., :n]),
            MatrixPath.from_half(grid, sol[..., n:n + k2]),
            MatrixPath.from_half(grid, sol[..., n + k2:]))


def solve_follower(data: ProblemData, grid: TimeGrid,
                   rcond_floor: float = DEFAULT_RCOND_FLOOR) -> FollowerSolution:
    P = solve_riccati_P(data, grid)
    tilde = build_tilde(P, data, rcond_floor=rcond_floor)
    K_x, K_w, K_phi = follower_gains(P, data, tilde)
    return FollowerSolution(P, K_x, K_w, K_phi, grid, tilde)


def follower_value(P: MatrixPath, phi: MatrixPath, w: MatrixPath, data: ProblemData,
                   x0=None) -> float:
    """Optimal follower cost for a fixed leader control, by completion of squares.

    ``1/2 <P_0 x, x> + <phi_0, x> + 1/2 int [2 <phi, B2 w> + sum_j <P D2j w, D2j w>
    - |R1~^{-1/2} (B1^T phi + sum_j D1j^T P D2j w)|^2] dt``, trapezoid in time.
    """
    grid = P.grid
    g = data.on_grid(grid)
    x = data.x0 if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    Pn = P.values
    ph = phi.vec
    wn = w.vec
    B1, B2, D1, D2, R1 = (g.nodes(k) for k in ("B1", "B2", "D1", "D2", "R1"))
    D1T = D1.swapaxes(-1, -2)
    R1t = R1 + (D1T @ Pn[:, None] @ D1).sum(axis=1)
    eig = np.linalg.eigvalsh(enforce_symmetry(R1t))[:, 0]
    if eig.min() <= 0:
        i = int(np.argmin(eig))
        raise IllConditioned("R1 + D1^T P D1 is not positive definite", time=grid.nodes[i])
    D2w = np.einsum("tjab,tb->tja", D2, wn)
    PD2w = np.einsum("tab,tjb->tja", Pn, D2w)
    v = np.einsum("tab,tb->ta", B1.swapaxes(-1, -2), ph) + np.einsum("tjab,tjb->ta", D1T, PD2w)
    quad = np.einsum("ta,ta->t", v, np.linalg.solve(R1t, v[..., None])[..., 0])
    integrand = (2.0 * np.einsum("ta,tab,tb->t", ph, B2, wn)
                 + np.einsum("tja,tja->t", PD2w, D2w)
                 - quad)
    return float(0.5 * x @ Pn[0] @ x + ph[0] @ x + 0.5 * trapezoid(integrand, grid.dt))


@dataclass
class AdjointPath:
    q: np.ndarray    # (M, N + 1, n)
    k: np.ndarray    # (M, N + 1, d, n)


def reconstruct_adjoint(P: MatrixPath, phi: MatrixPath, x, u, w, data: ProblemData) -> AdjointPath:
    """``q = -P x - phi`` and ``k^j = -P (C^j x + D1j u + D2j w)`` along sample paths.

    ``x``: ``(M, N + 1, n)``, ``u``: ``(M, N + 1, k1)``, ``w``: node array ``(N + 1, k2)``.
    """
    g = data.on_grid(P.grid)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape[-2] != P.grid.steps + 1:
        raise ShapeMismatch("state paths are not on the solution grid")
    Pn = P.values
    q = -np.einsum("tab,...tb->...ta", Pn, x) - phi.vec
    sig = (np.einsum("tjab,...tb->...tja", g.nodes("C"), x)
           + np.einsum("tjab,...tb->...tja", g.nodes("D1"), u)
           + np.einsum("tjab,tb->tja", g.nodes("D2"), w))
    k = -np.einsum("tab,...tjb->...tja", Pn, sig)
    return AdjointPath(q, k)


def follower_stationarity_residual(adjoint: AdjointPath, x, u, data: ProblemData,
                                   grid: TimeGrid, relative: bool = False) -> float:
    """Sup over nodes and paths of ``|R1 u + S1 x - B1^T q - sum_j D1j^T k^j|``.

    With ``relative=True`` the residual is divided by the sup of the sum of the
    magnitudes of the four terms.
    """
    g = data.on_grid(grid)
    terms = (np.einsum("tab,...tb->...ta", g.nodes("R1"), u),
             np.einsum("tab,...tb->...ta", g.nodes("S1"), x),
             -np.einsum("tba,...tb->...ta", g.nodes("B1"), adjoint.q),
             -np.einsum("tjba,...tjb->...ta", g.nodes("D1"), adjoint.k))
    res = np.linalg.norm(sum(terms), axis=-1).max(initial=0.0)
    if not relative:
        return float(res)
    scale = sum(np.linalg.norm(t, axis=-1) for t in terms).max(initial=0.0)
    return float(res / scale) if scale > 0 else float(res)


def riccati_residual(P: MatrixPath, data: ProblemData) -> float:
    """Sup over interior nodes of ``|(P_{i+1} - P_{i-1}) / 2h - F(t_i, P_i)|``."""
    grid = P.grid
    field = riccati_P_field(data, grid)
    v = P.values
    fd = (v[2:] - v[:-2]) / (2.0 * grid.dt)
    rhs = np.stack([field(t, v[i + 1]) for i, t in enumerate(grid.nodes[1:-1])])
    return float(np.abs(fd - rhs).max(initial=0.0))
