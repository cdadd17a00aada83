"""Monte Carlo verification of the equilibrium.

Paths are simulated by Euler-Maruyama in fixed-size chunks.  Path ``i``
draws its Brownian increments from its own Philox stream keyed by
``(seed, i)``, so a path's noise never depends on how the work is split;
chunks may run on a thread pool (``STACKELBERG_LQ_THREADS`` caps it) and
are always reduced in path order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import NonFinite, ShapeMismatch
from .follower import (FollowerSolution, follower_stationarity_residual, follower_value,
                       reconstruct_adjoint, solve_phi)
from .leader import LeaderSolution, leader_stationarity_residual
from .model import ProblemData
from .numerics import MatrixPath, TimeGrid, trapezoid

THREADS_ENV = "STACKELBERG_LQ_THREADS"
CHUNK_PATHS = 1024


@dataclass(frozen=True)
class SimConfig:
    paths: int
    seed: int = 42
    antithetic: bool = False
    grid: Optional[TimeGrid] = None
    workers: Optional[int] = None

    def __post_init__(self):
        if int(self.paths) != self.paths or self.paths < 2:
            raise ValueError(f"need at least 2 paths, got {self.paths}")
        if self.antithetic and (self.paths % 2 or self.paths < 4):
            raise ValueError("antithetic sampling needs an even number of paths >= 4")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def units(self) -> int:
        """Number of independent sampling units (antithetic pairs count once)."""
        return self.paths // 2 if self.antithetic else self.paths


def worker_count(cfg: SimConfig) -> int:
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    raw = os.environ.get(THREADS_ENV, "").strip()
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def brownian_increments(cfg: SimConfig, grid: TimeGrid, d: int, start: int, stop: int) -> np.ndarray:
    """Increments for paths ``start..stop-1``, shape ``(paths, N, d)``.

    With antithetic sampling paths ``2i`` and ``2i+1`` share stream ``i``
    with opposite signs.
    """
    out = np.empty((stop - start, grid.steps, d))
    scale = np.sqrt(grid.dt)
    for row, i in enumerate(range(start, stop)):
        stream = i // 2 if cfg.antithetic else i
        gen = np.random.Generator(np.random.Philox(key=int(cfg.seed), counter=stream << 128))
        z = gen.standard_normal((grid.steps, d))
        out[row] = -z if (cfg.antithetic and i % 2) else z
    out *= scale
    return out


def _chunks(total: int, size: int = CHUNK_PATHS):
    return [(s, min(s + size, total)) for s in range(0, total, size)]


def _map_chunks(fn: Callable, spans, workers: int) -> list:
    if workers <= 1 or len(spans) <= 1:
        return [fn(s, e) for s, e in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda se: fn(*se), spans))


def _grid_of(cfg: SimConfig, follower: FollowerSolution) -> TimeGrid:
    grid = cfg.grid or follower.grid
    if grid != follower.grid:
        raise ShapeMismatch("simulation grid differs from the solver grid")
    return grid


def _check_paths(x, start: int):
    bad = ~np.isfinite(x).reshape(x.shape[0], x.shape[1], -1).all(axis=2)
    if bad.any():
        p, t = np.argwhere(bad)[0]
        raise NonFinite(f"path {start + p} blew up at node {t}")


# ---------------------------------------------------------------- state kernels

def simulate_feedback_state(data: ProblemData, follower: FollowerSolution, w, phi, dW,
                            x0=None):
    """Euler-Maruyama for the follower's optimal feedback against ``(w, phi)``.

    ``w`` and ``phi`` are node arrays ``(B, N+1, k2)`` and ``(B, N+1, n)`` for a
    batch of ``B`` leader controls (a 2-D array means ``B = 1``); ``dW`` is
    ``(M, N, d)``.  Returns ``x (B, M, N+1, n)`` and ``u (B, M, N+1, k1)``.
    The feedback ``u = K_x x + K_w w + K_phi phi`` is substituted into the
    original state equation.
    """
    grid = follower.grid
    g = data.on_grid(grid)
    w = np.asarray(w, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if w.ndim == 2:
        w, phi = w[None], phi[None]
    Kx = follower.K_x.values
    c = (np.einsum("tij,btj->bti", follower.K_w.values, w)
         + np.einsum("tij,btj->bti", follower.K_phi.values, phi))
    A, B1, B2 = g.nodes("A"), g.nodes("B1"), g.nodes("B2")
    C, D1, D2 = g.nodes("C"), g.nodes("D1"), g.nodes("D2")
    Acl = A + B1 @ Kx
    Ccl = C + D1 @ Kx[:, None]
    f = np.einsum("tij,btj->bti", B1, c) + np.einsum("tij,btj->bti", B2, w)
    gj = np.einsum("tkij,btj->btki", D1, c) + np.einsum("tkij,btj->btki", D2, w)
    x = _euler_affine(data, grid, Acl, Ccl, f, gj, dW, x0)
    u = np.einsum("tij,bmtj->bmti", Kx, x) + c[:, None]
    return x, u


def simulate_open_loop_state(data: ProblemData, grid: TimeGrid, u, w, dW, x0=None):
    """Euler-Maruyama for a given control process ``u (B, M, N+1, k1)``."""
    g = data.on_grid(grid)
    w = np.asarray(w, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == 3:
        u = u[None]
    A, B1, B2 = g.nodes("A"), g.nodes("B1"), g.nodes("B2")
    C, D1, D2 = g.nodes("C"), g.nodes("D1"), g.nodes("D2")
    f = np.einsum("tij,bmtj->bmti", B1, u) + (B2 @ w[:, :, None])[:, :, 0]
    gj = np.einsum("tkij,bmtj->bmtki", D1, u) + np.einsum("tkij,tj->tki", D2, w)
    return _euler_affine(data, grid, A, C, f, gj, dW, x0, per_path=True)


def _euler_affine(data, grid, A, C, f, gj, dW, x0, per_path=False):
    """``dx = (A x + f) dt + sum_j (C_j x + g_j) dW^j`` on a batch of paths.

    ``f`` is ``(B, N+1, n)`` or, with ``per_path``, ``(B, M, N+1, n)``.
    """
    n = data.dims.n
    d = data.dims.d
    dW = np.asarray(dW, dtype=float)
    M, N = dW.shape[0], grid.steps
    if dW.shape[1:] != (N, d):
        raise ShapeMismatch(f"increments must be (M, {N}, {d}), got {dW.shape}")
    B = f.shape[0]
    h = grid.dt
    x0 = data.x0 if x0 is None else np.asarray(x0, dtype=float).reshape(n)
    x = np.empty((B, M, N + 1, n))
    x[:, :, 0] = x0
    AT = np.ascontiguousarray(A.swapaxes(-1, -2))
    # stack the channels so one matmul gives every C_j x
    CT = np.ascontiguousarray(C.transpose(0, 3, 1, 2).reshape(N + 1, n, d * n))
    for i in range(N):
        xi = x[:, :, i]
        fi = f[:, :, i] if per_path else f[:, None, i]
        gi = gj[:, :, i] if per_path else gj[:, None, i]
        diff = (xi @ CT[i]).reshape(B, M, d, n) + gi
        x[:, :, i + 1] = (xi + h * (xi @ AT[i] + fi)
                          + np.einsum("bmjn,mj->bmn", diff, dW[:, i]))
    return x


# ---------------------------------------------------------------- equilibrium

@dataclass
class TrajectoryBundle:
    grid: TimeGrid
    start: int
    x: np.ndarray        # (M, N+1, n)
    u: np.ndarray        # (M, N+1, k1)
    p: np.ndarray        # (M, N+1, n)
    y: np.ndarray        # (M, N+1, n)
    z: np.ndarray        # (M, N+1, d, n)
    w: np.ndarray        # (N+1, k2), shared
    dW: np.ndarray       # (M, N, d)
    antithetic: bool = False

    @property
    def paths(self) -> int:
        return self.x.shape[0]


def _node(a):
    return a[0::2]


def y_driver(data: ProblemData, follower: FollowerSolution, y, z, x, w):
    """``f`` in ``-dy = f dt - z dW``: ``A~^T y + sum_j C~j^T z^j + S2^T w + Q2 x``."""
    tilde = follower.tilde
    g = data.on_grid(follower.grid)
    return (np.einsum("tba,mtb->mta", _node(tilde.A), y)
            + np.einsum("tjba,mtjb->mta", _node(tilde.C), z)
            + np.einsum("tba,tb->ta", g.nodes("S2"), w)
            + np.einsum("tab,mtb->mta", g.nodes("Q2"), x))


def p_display_coefficients(follower: FollowerSolution, leader: LeaderSolution):
    """Node coefficients of the expanded ``p`` equation.

    ``dp/dt = A~ p + Hx x + HEx Ex + Hps phi* + HEp Ep + Hph phi`` after
    substituting the ansatz for ``y``, ``z`` and the feedback form of ``w*``.
    """
    t, bar = follower.tilde, leader.bar
    At, B1t = _node(t.A), _node(t.B1)
    C, D1, D2 = _node(t.C), _node(t.D1), _node(t.D2)
    Pi, P2 = _node(bar.Pi), _node(bar.P2)
    N21T = np.swapaxes(_node(bar.N21), -1, -2)
    D1T = np.swapaxes(D1, -1, -2)
    Hx = B1t @ Pi + np.einsum("tjba,tbc,tjcd->tad", D1, Pi, C)
    HEx = -B1t @ P2 + N21T @ leader.L_Ex.values
    Hps = np.einsum("tjab,tbc,tjcd->tad", D1T, Pi, D1) + N21T @ leader.L_phiStar.values
    HEp = N21T @ leader.L_Ep.values
    Hph = B1t + N21T @ leader.L_phi.values
    return At, Hx, HEx, Hps, HEp, Hph


def simulate_closed_loop(data: ProblemData, follower: FollowerSolution, leader: LeaderSolution,
                         cfg: SimConfig, start: int = 0, stop: Optional[int] = None) -> TrajectoryBundle:
    """Equilibrium paths for path indices ``start..stop-1`` (default: all)."""
    grid = _grid_of(cfg, follower)
    stop = cfg.paths if stop is None else stop
    dW = brownian_increments(cfg, grid, data.dims.d, start, stop)
    bvp = leader.bvp
    w = leader.w_star.vec
    ps = bvp.phi_star.vec
    x, u = simulate_feedback_state(data, follower, w, ps, dW)
    x, u = x[0], u[0]
    _check_paths(x, start)

    Ex, Ep, ph = bvp.Ex.vec, bvp.Ep.vec, bvp.phi.vec
    At, Hx, HEx, Hps, HEp, Hph = p_display_coefficients(follower, leader)
    drive = (np.einsum("tab,tb->ta", HEx, Ex) + np.einsum("tab,tb->ta", Hps, ps)
             + np.einsum("tab,tb->ta", HEp, Ep) + np.einsum("tab,tb->ta", Hph, ph))
    h = grid.dt
    p = np.empty_like(x)
    p[:, 0] = 0.0
    AtT = np.ascontiguousarray(np.swapaxes(At, -1, -2))
    HxT = np.ascontiguousarray(np.swapaxes(Hx, -1, -2))
    for i in range(grid.steps):
        p[:, i + 1] = p[:, i] + h * (p[:, i] @ AtT[i] + x[:, i] @ HxT[i] + drive[i])
    _check_paths(p, start)

    bar, tilde = leader.bar, follower.tilde
    Pi, P2 = _node(bar.Pi), _node(bar.P2)
    y = np.einsum("tab,mtb->mta", Pi, x) - np.einsum("tab,tb->ta", P2, Ex) + ph
    sig = (np.einsum("tjab,mtb->mtja", _node(tilde.C), x)
           + np.einsum("tjab,tb->tja", _node(tilde.D1), ps)
           + np.einsum("tjab,tb->tja", _node(tilde.D2), w))
    z = np.einsum("tab,mtjb->mtja", Pi, sig)
    return TrajectoryBundle(grid, start, x, u, p, y, z, w, dW, cfg.antithetic)


def path_costs(x, u, w, data: ProblemData, grid: TimeGrid):
    """Per-path ``(J1, J2)`` by trapezoid quadrature; ``x (..., N+1, n)``."""
    g = data.on_grid(grid)
    Q1, S1, R1 = g.nodes("Q1"), g.nodes("S1"), g.nodes("R1")
    Q2, S2, R2 = g.nodes("Q2"), g.nodes("S2"), g.nodes("R2")
    w = np.asarray(w, dtype=float)
    i1 = (np.einsum("...ta,tab,...tb->...t", x, Q1, x)
          + 2.0 * np.einsum("...ta,tab,...tb->...t", u, S1, x)
          + np.einsum("...ta,tab,...tb->...t", u, R1, u))
    i2 = (np.einsum("...ta,tab,...tb->...t", x, Q2, x)
          + 2.0 * np.einsum("...ta,tab,...tb->...t", w, S2, x)
          + np.einsum("...ta,tab,...tb->...t", w, R2, w))
    xT = x[..., -1, :]
    J1 = 0.5 * (trapezoid(i1, grid.dt, axis=-1) + np.einsum("...a,ab,...b->...", xT, data.G1, xT))
    J2 = 0.5 * (trapezoid(i2, grid.dt, axis=-1) + np.einsum("...a,ab,...b->...", xT, data.G2, xT))
    return J1, J2


def _units(a, antithetic: bool, axis: int = 0):
    """Collapse antithetic pairs into their averages along ``axis``."""
    if not antithetic:
        return a
    a = np.moveaxis(a, axis, 0)
    return np.moveaxis(0.5 * (a[0::2] + a[1::2]), 0, axis)


def mean_se(values, axis: int = 0):
    """Sample mean and standard error along ``axis``."""
    values = np.asarray(values, dtype=float)
    m = values.shape[axis]
    mean = values.mean(axis=axis)
    if m < 2:
        return mean, np.full_like(mean, np.nan)
    return mean, values.std(axis=axis, ddof=1) / np.sqrt(m)


@dataclass
class Estimate:
    mean: float
    se: float

    def as_dict(self):
        return {"mean": self.mean, "se": self.se}


@dataclass
class CostReport:
    J1_mc: Estimate
    J2_mc: Estimate
    J1_formula: float
    stationarity_follower: float
    stationarity_leader: float
    mf_fbsde_residuals: dict
    paths: int
    antithetic: bool

    @property
    def value_gap_se(self) -> float:
        """``|J1_mc - J1_formula|`` in standard errors."""
        gap = abs(self.J1_mc.mean - self.J1_formula)
        return gap / self.J1_mc.se if self.J1_mc.se > 0 else (0.0 if gap < 1e-12 else np.inf)

    def as_dict(self):
        return {"J1_mc": self.J1_mc.as_dict(), "J2_mc": self.J2_mc.as_dict(),
                "J1_formula": self.J1_formula, "value_gap_se": self.value_gap_se,
                "stationarity_follower": self.stationarity_follower,
                "stationarity_leader": self.stationarity_leader,
                "mf_fbsde_residuals": self.mf_fbsde_residuals,
                "paths": self.paths, "antithetic": self.antithetic}


@dataclass
class MonteCarloStats:
    """Streaming reduction of equilibrium paths (everything needed downstream)."""

    grid: TimeGrid
    antithetic: bool
    J1: np.ndarray            # per sampling unit
    J2: np.ndarray
    sum_x: np.ndarray         # sums over units of unit values, (N+1, n)
    sumsq_x: np.ndarray
    sum_p: np.ndarray
    sumsq_p: np.ndarray
    sum_y: np.ndarray
    sum_z: np.ndarray         # (N+1, d, n)
    sum_back: np.ndarray      # sum over paths of the local y-residual, (N, n)
    sum_terminal: float       # sum over paths of |y_T - G2 x_T|
    forward_consistency: float
    p_consistency: float
    follower_stationarity: float
    paths: int

    @property
    def units(self) -> int:
        return len(self.J1)

    def mean(self, name):
        return getattr(self, "sum_" + name) / self.units

    def se(self, name):
        m = self.units
        mean = self.mean(name)
        var = (getattr(self, "sumsq_" + name) - m * mean ** 2) / max(m - 1, 1)
        return np.sqrt(np.maximum(var, 0.0) / m)

    def merge(self, other: "MonteCarloStats") -> "MonteCarloStats":
        return MonteCarloStats(
            self.grid, self.antithetic,
            np.concatenate([self.J1, other.J1]), np.concatenate([self.J2, other.J2]),
            self.sum_x + other.sum_x, self.sumsq_x + other.sumsq_x,
            self.sum_p + other.sum_p, self.sumsq_p + other.sumsq_p,
            self.sum_y + other.sum_y, self.sum_z + other.sum_z,
            self.sum_back + other.sum_back, self.sum_terminal + other.sum_terminal,
            max(self.forward_consistency, other.forward_consistency),
            max(self.p_consistency, other.p_consistency),
            max(self.follower_stationarity, other.follower_stationarity),
            self.paths + other.paths)


def _rel_max(res, *terms):
    scale = max(np.abs(t).max(initial=0.0) for t in terms)
    r = np.abs(res).max(initial=0.0)
    return float(r / scale) if scale > 0 else float(r)


def bundle_stats(bundle: TrajectoryBundle, data: ProblemData, follower: FollowerSolution,
                 leader: LeaderSolution) -> MonteCarloStats:
    """Reduce one bundle to sums, consistency checks and per-unit costs."""
    grid = bundle.grid
    h = grid.dt
    anti = bundle.antithetic
    x, u, p, y, z, w, dW = bundle.x, bundle.u, bundle.p, bundle.y, bundle.z, bundle.w, bundle.dW
    tilde = follower.tilde
    bvp = leader.bvp
    ps = bvp.phi_star.vec

    J1, J2 = path_costs(x, u, w, data, grid)

    # (i) x increments against the equilibrium form of the state equation
    drift = (np.einsum("tab,mtb->mta", _node(tilde.A), x)
             + np.einsum("tab,tb->ta", _node(tilde.B1), ps)
             + np.einsum("tab,tb->ta", _node(tilde.B2), w))
    sig = (np.einsum("tjab,mtb->mtja", _node(tilde.C), x)
           + np.einsum("tjab,tb->tja", _node(tilde.D1), ps)
           + np.einsum("tjab,tb->tja", _node(tilde.D2), w))
    noise = np.einsum("mtja,mtj->mta", sig[:, :-1], dW)
    dx = x[:, 1:] - x[:, :-1]
    fwd = _rel_max(dx - h * drift[:, :-1] - noise, dx, h * drift, noise)

    # p increments against the adjoint form A~ p + B1~^T y + sum_j D1j~^T z^j
    pdrift = (np.einsum("tab,mtb->mta", _node(tilde.A), p)
              + np.einsum("tba,mtb->mta", _node(tilde.B1), y)
              + np.einsum("tjba,mtjb->mta", _node(tilde.D1), z))
    dp = p[:, 1:] - p[:, :-1]
    pcons = _rel_max(dp - h * pdrift[:, :-1], dp, h * pdrift)

    # (iv) local residual of -dy = f dt - z dW
    f = y_driver(data, follower, y, z, x, w)
    back = (y[:, 1:] - y[:, :-1] + h * f[:, :-1]
            - np.einsum("mtja,mtj->mta", z[:, :-1], dW)).sum(axis=0)
    term = float(np.linalg.norm(y[:, -1] - x[:, -1] @ data.G2.T, axis=-1).sum())

    adj = reconstruct_adjoint(follower.P, bvp.phi_star, x, u, w, data)
    fstat = follower_stationarity_residual(adj, x, u, data, grid, relative=True)

    xu, pu = _units(x, anti), _units(p, anti)
    return MonteCarloStats(
        grid, anti, _units(J1, anti), _units(J2, anti),
        xu.sum(axis=0), (xu ** 2).sum(axis=0), pu.sum(axis=0), (pu ** 2).sum(axis=0),
        _units(y, anti).sum(axis=0), _units(z, anti).sum(axis=0),
        back, term, fwd, pcons, fstat, bundle.paths)


def run_monte_carlo(data: ProblemData, follower: FollowerSolution, leader: LeaderSolution,
                    cfg: SimConfig) -> MonteCarloStats:
    """Simulate all ``cfg.paths`` equilibrium paths chunk by chunk."""
    grid = _grid_of(cfg, follower)

    def work(s, e):
        return bundle_stats(simulate_closed_loop(data, follower, leader, cfg, s, e),
                            data, follower, leader)

    parts = _map_chunks(work, _chunks(cfg.paths), worker_count(cfg))
    out = parts[0]
    for part in parts[1:]:
        out = out.merge(part)
    assert out.grid == grid
    return out


def _fd_residual(path: MatrixPath, rhs: np.ndarray, h: float) -> float:
    """Sup of the forward-difference defect ``(v_{i+1} - v_i)/h - rhs_i``."""
    v = path.vec
    return float(np.abs((v[1:] - v[:-1]) / h - rhs[:-1]).max(initial=0.0))


def mf_fbsde_residual(source, data: ProblemData, follower: FollowerSolution,
                      leader: LeaderSolution) -> dict:
    """Sup-norm residuals of the five lines of the mean-field FBSDE system.

    ``source`` is a :class:`TrajectoryBundle` or :class:`MonteCarloStats`.
    ``phi_star`` and ``Ep`` are the boundary-value solutions, checked by
    forward differences against their own ODEs (O(dt) by construction);
    ``backward`` is the running maximum over nodes of the path-averaged
    cumulative defect of the y equation.
    """
    stats = source
    if isinstance(source, TrajectoryBundle):
        stats = bundle_stats(source, data, follower, leader)
    grid = stats.grid
    h = grid.dt
    tilde, bvp = follower.tilde, leader.bvp
    w = leader.w_star.vec
    ps = bvp.phi_star.vec
    phi_rhs = -(np.einsum("tba,tb->ta", _node(tilde.A), ps)
                + np.einsum("tab,tb->ta", _node(tilde.Gamma), w))
    At, Hx, HEx, Hps, HEp, Hph = p_display_coefficients(follower, leader)
    Ex, Ep, ph = bvp.Ex.vec, bvp.Ep.vec, bvp.phi.vec
    p_rhs = (np.einsum("tab,tb->ta", At, Ep) + np.einsum("tab,tb->ta", Hx + HEx, Ex)
             + np.einsum("tab,tb->ta", Hps, ps) + np.einsum("tab,tb->ta", HEp, Ep)
             + np.einsum("tab,tb->ta", Hph, ph))
    mean_back = stats.sum_back / stats.paths
    cum = np.cumsum(mean_back, axis=0)
    backward = float(np.linalg.norm(cum, axis=-1).max(initial=0.0))
    means = (stats.mean("y"), stats.mean("z"), stats.mean("x"), stats.mean("p"))
    return {
        "forward": stats.forward_consistency,
        "phi_star": _fd_residual(bvp.phi_star, phi_rhs, h),
        "p": _fd_residual(bvp.Ep, p_rhs, h),
        "p_pathwise": stats.p_consistency,
        "backward": backward,
        "terminal": stats.sum_terminal / stats.paths,
        "stationarity": leader_stationarity_residual(leader, means, data, tilde),
    }


def estimate_costs(source, data: ProblemData, cfg: SimConfig, follower: FollowerSolution,
                   leader: LeaderSolution) -> CostReport:
    """Sample costs with standard errors, plus the closed-form follower value."""
    stats = source
    if isinstance(source, TrajectoryBundle):
        stats = bundle_stats(source, data, follower, leader)
    j1, s1 = mean_se(stats.J1)
    j2, s2 = mean_se(stats.J2)
    formula = follower_value(follower.P, leader.bvp.phi_star, leader.w_star, data)
    res = mf_fbsde_residual(stats, data, follower, leader)
    return CostReport(Estimate(float(j1), float(s1)), Estimate(float(j2), float(s2)),
                      formula, stats.follower_stationarity, res["stationarity"], res,
                      stats.paths, stats.antithetic)


# ---------------------------------------------------------------- perturbations

@dataclass
class DirectionResult:
    label: str
    epsilons: List[float]
    delta_mean: List[float]
    delta_se: List[float]
    derivative: Optional[float] = None
    derivative_se: Optional[float] = None
    derivative_eps: Optional[float] = None
    ratios: dict = field(default_factory=dict)

    def convex(self, k: float) -> bool:
        return all(m >= -k * s - 1e-12 * (1 + abs(m))
                   for m, s in zip(self.delta_mean, self.delta_se))

    def stationary(self, k: float) -> bool:
        if self.derivative is None:
            return True
        return abs(self.derivative) <= k * self.derivative_se + 1e-12

    def as_dict(self):
        return {"label": self.label, "epsilons": self.epsilons, "delta_mean": self.delta_mean,
                "delta_se": self.delta_se, "derivative": self.derivative,
                "derivative_se": self.derivative_se, "derivative_eps": self.derivative_eps,
                "ratios": {str(k): v for k, v in self.ratios.items()}}


@dataclass
class PerturbationReport:
    player: str
    base_cost: Estimate
    directions: List[DirectionResult]

    def stationary(self, k: float = 2.0) -> bool:
        return all(d.stationary(k) for d in self.directions)

    def convex(self, k: float = 2.0) -> bool:
        return all(d.convex(k) for d in self.directions)

    def quadratic(self, low: float = 3.5, high: float = 4.5) -> bool:
        return all(low <= r <= high for d in self.directions for r in d.ratios.values())

    def as_dict(self):
        return {"player": self.player, "base_cost": self.base_cost.as_dict(),
                "directions": [d.as_dict() for d in self.directions]}


def _direction_table(label, epsilons, J, base, antithetic):
    """Per-epsilon mean/SE of ``J(eps) - J(0)`` from per-path costs (CRN)."""
    deltas = [_units(J[b] - base, antithetic) for b in range(len(epsilons))]
    stats = [mean_se(dl) for dl in deltas]
    res = DirectionResult(label, [float(e) for e in epsilons],
                          [float(m) for m, _ in stats], [float(s) for _, s in stats])
    pos = sorted(e for e in epsilons if e > 0 and -e in epsilons)
    if pos:
        e = pos[0]
        i, j = epsilons.index(e), epsilons.index(-e)
        m, s = mean_se(_units((J[i] - J[j]) / (2 * e), antithetic))
        res.derivative, res.derivative_se, res.derivative_eps = float(m), float(s), float(e)
    for e in epsilons:
        if e > 0 and 2 * e in epsilons:
            small = res.delta_mean[epsilons.index(e)]
            if small != 0:
                res.ratios[float(e)] = float(res.delta_mean[epsilons.index(2 * e)] / small)
    return res


def _as_node_path(delta, grid: TimeGrid, width: int) -> np.ndarray:
    if isinstance(delta, MatrixPath):
        delta = delta.vec
    delta = np.asarray(delta, dtype=float)
    if delta.ndim == 1 and width == 1:
        delta = delta[:, None]
    if delta.shape != (grid.steps + 1, width):
        raise ShapeMismatch(f"direction must be ({grid.steps + 1}, {width}), got {delta.shape}")
    return delta


def smooth_directions(grid: TimeGrid, width: int, count: int, seed: int = 0) -> List[np.ndarray]:
    """Random smooth deterministic directions: short sine/cosine series."""
    rng = np.random.default_rng(seed)
    t = grid.nodes / grid.horizon
    out = []
    for _ in range(count):
        a = rng.standard_normal((3, width))
        b = rng.standard_normal((3, width))
        d = sum(a[k] * np.sin((k + 1) * np.pi * t)[:, None]
                + b[k] * np.cos(k * np.pi * t)[:, None] for k in range(3))
        out.append(d / max(np.abs(d).max(), 1e-12))
    return out


def perturb_leader(data: ProblemData, follower: FollowerSolution, leader: LeaderSolution,
                   directions: Sequence, epsilons: Sequence[float], cfg: SimConfig,
                   w_base: Optional[MatrixPath] = None) -> PerturbationReport:
    """Leader cost deltas ``J2(w + eps delta) - J2(w)`` with the follower re-optimising.

    For every branch the follower's affine term is re-solved for the
    perturbed control (``P`` does not depend on ``w``) and the state is
    re-simulated on the same Brownian increments.  ``w_base`` defaults to
    ``w*``; the base branch is recomputed the same way for consistency.
    """
    grid = _grid_of(cfg, follower)
    k2 = data.dims.k2
    base = leader.w_star if w_base is None else w_base
    bh = base.half()
    eps = [float(e) for e in epsilons if e != 0]
    branches = [np.zeros((grid.steps + 1, k2))]
    labels = []
    for k, dl in enumerate(directions):
        dn = _as_node_path(dl, grid, k2)
        labels.append(f"direction_{k}")
        branches.extend(e * dn for e in eps)
    ws, phis = [], []
    for shift in branches:
        dh = MatrixPath(grid, shift[:, :, None]).half()
        w = MatrixPath.from_half(grid, bh + dh)
        ws.append(w.vec)
        phis.append(solve_phi(follower.P, w, data, grid, follower.tilde).vec)
    ws, phis = np.stack(ws), np.stack(phis)
    chunk = max(64, (CHUNK_PATHS // len(branches)) // 2 * 2)

    def work(s, e):
        dW = brownian_increments(cfg, grid, data.dims.d, s, e)
        x, u = simulate_feedback_state(data, follower, ws, phis, dW)
        _check_paths(x.reshape(-1, *x.shape[2:]), s)
        return np.stack([path_costs(x[b], u[b], ws[b], data, grid)[1]
                         for b in range(len(branches))])

    J = np.concatenate(_map_chunks(work, _chunks(cfg.paths, chunk), worker_count(cfg)), axis=1)
    m, s = mean_se(_units(J[0], cfg.antithetic))
    results = []
    for k, label in enumerate(labels):
        rows = J[1 + k * len(eps): 1 + (k + 1) * len(eps)]
        results.append(_direction_table(label, eps, rows, J[0], cfg.antithetic))
    return PerturbationReport("leader", Estimate(float(m), float(s)), results)


@dataclass
class FollowerDirection:
    """Adapted follower perturbation: ``g(t)`` or ``g(t) W^channel_t``."""

    kind: str            # "deterministic" or "brownian"
    g: np.ndarray        # (N+1, k1)
    channel: int = 0

    def __post_init__(self):
        if self.kind not in ("deterministic", "brownian"):
            raise ValueError(f"unknown perturbation family {self.kind!r}")

    def sample(self, dW) -> np.ndarray:
        """Perturbation on each path, ``(M, N+1, k1)``."""
        M = dW.shape[0]
        if self.kind == "deterministic":
            return np.broadcast_to(self.g, (M,) + self.g.shape)
        W = np.zeros((M, dW.shape[1] + 1))
        np.cumsum(dW[:, :, self.channel], axis=1, out=W[:, 1:])
        return self.g[None] * W[:, :, None]


def perturb_follower(data: ProblemData, follower: FollowerSolution, w: MatrixPath,
                     directions: Sequence[FollowerDirection], epsilons: Sequence[float],
                     cfg: SimConfig) -> PerturbationReport:
    """Follower cost deltas ``J1(u* + eps delta) - J1(u*)`` for a fixed leader control."""
    grid = _grid_of(cfg, follower)
    wn = w.vec
    phi = solve_phi(follower.P, w, data, grid, follower.tilde).vec
    eps = [float(e) for e in epsilons if e != 0]
    nb = 1 + len(directions) * len(eps)
    chunk = max(64, (CHUNK_PATHS // nb) // 2 * 2)

    def work(s, e):
        dW = brownian_increments(cfg, grid, data.dims.d, s, e)
        x, u = simulate_feedback_state(data, follower, wn, phi, dW)
        _check_paths(x[0], s)
        us = [u[0] + ep * dr.sample(dW) for dr in directions for ep in eps]
        out = [path_costs(x[0], u[0], wn, data, grid)[0]]
        if us:
            xs = simulate_open_loop_state(data, grid, np.stack(us), wn, dW)
            out.extend(path_costs(xs[b], us[b], wn, data, grid)[0] for b in range(len(us)))
        return np.stack(out)

    J = np.concatenate(_map_chunks(work, _chunks(cfg.paths, chunk), worker_count(cfg)), axis=1)
    m, s = mean_se(_units(J[0], cfg.antithetic))
    results = []
    for k, dr in enumerate(directions):
        rows = J[1 + k * len(eps): 1 + (k + 1) * len(eps)]
        results.append(_direction_table(f"{dr.kind}_{k}", eps, rows, J[0], cfg.antithetic))
    return PerturbationReport("follower", Estimate(float(m), float(s)), results)
