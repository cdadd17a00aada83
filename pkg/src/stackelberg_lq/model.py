"""Game data, assumption checks, and the transformed ("tilde"/"bar") coefficients.

Coefficients may be given as constant 2-D arrays, as node-sampled 3-D arrays
of shape ``(N + 1, r, c)`` (linearly interpolated at the RK4 half-nodes), or
as callables ``t -> matrix``.  Noise-indexed coefficients ``C``, ``D1`` and
``D2`` are sequences of length ``d``, one entry per Brownian channel; every
product involving them is summed over the channels.

All derived families are stored on the half grid: arrays with a leading
axis of length ``2N + 1``, noise channel (when present) on axis 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .config import DEFAULT_TOLERANCES, Tolerances
from .errors import IllConditioned, NotSymmetric, ShapeMismatch
from .numerics import MatrixPath, TimeGrid, enforce_symmetry

SYM_TOL = 1e-12


@dataclass(frozen=True)
class Dims:
    n: int
    k1: int
    k2: int
    d: int

    def __post_init__(self):
        for name in ("n", "k1", "k2", "d"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeMismatch(f"dimension {name} must be a positive integer, got {v}")


def _sample(coef, grid: TimeGrid, shape, name) -> np.ndarray:
    """Sample one coefficient on the half grid -> ``(2N + 1,) + shape``."""
    k = 2 * grid.steps + 1
    if callable(coef):
        out = np.stack([np.atleast_2d(np.asarray(coef(t), dtype=float))
                        for t in grid.half_nodes])
    else:
        arr = np.asarray(coef, dtype=float)
        if arr.ndim <= 2:
            if arr.ndim < 2 and arr.size == np.prod(shape):
                arr = arr.reshape(shape)
            out = np.broadcast_to(arr, (k,) + arr.shape)
        elif arr.ndim == 3 and arr.shape[0] == grid.steps + 1:
            out = np.empty((k,) + arr.shape[1:])
            out[0::2] = arr
            out[1::2] = 0.5 * (arr[:-1] + arr[1:])
        else:
            raise ShapeMismatch(
                f"{name}: time-sampled coefficient must have {grid.steps + 1} nodes, "
                f"got array of shape {arr.shape}"
            )
    if out.shape[1:] != tuple(shape):
        raise ShapeMismatch(f"{name}: expected shape {tuple(shape)}, got {out.shape[1:]}")
    if not np.all(np.isfinite(out)):
        raise ShapeMismatch(f"{name}: non-finite entries")
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class GridData:
    """A :class:`ProblemData` sampled on the half grid of ``grid``."""

    grid: TimeGrid
    dims: Dims
    x0: np.ndarray
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    G1: np.ndarray
    G2: np.ndarray

    def nodes(self, name: str) -> np.ndarray:
        """Node samples (every other half-grid entry) of a coefficient."""
        return getattr(self, name)[0::2]


@dataclass
class ProblemData:
    dims: Dims
    horizon: float
    x0: Any
    A: Any
    B1: Any
    B2: Any
    C: Sequence[Any]
    D1: Sequence[Any]
    D2: Sequence[Any]
    Q1: Any
    Q2: Any
    S1: Any
    S2: Any
    R1: Any
    R2: Any
    G1: Any
    G2: Any
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if self.x0.shape != (self.dims.n,):
            raise ShapeMismatch(f"x0 must have length {self.dims.n}, got {self.x0.shape}")
        for name in ("C", "D1", "D2"):
            if len(getattr(self, name)) != self.dims.d:
                raise ShapeMismatch(
                    f"{name} must list one matrix per Brownian channel (d={self.dims.d})"
                )
        for name in ("G1", "G2"):
            g = np.asarray(getattr(self, name), dtype=float)
            if g.shape != (self.dims.n, self.dims.n):
                raise ShapeMismatch(f"{name} must be {self.dims.n}x{self.dims.n}")
            if not np.all(np.isfinite(g)):
                raise ShapeMismatch(f"{name}: non-finite entries")
            if np.abs(g - g.T).max() > SYM_TOL * max(1.0, np.abs(g).max()):
                raise NotSymmetric(f"{name} is not symmetric")
            setattr(self, name, g)

    def on_grid(self, grid: TimeGrid) -> GridData:
        """Sample every coefficient on the half grid (cached per grid)."""
        if abs(grid.horizon - self.horizon) > 1e-12 * self.horizon:
            raise ShapeMismatch(
                f"grid horizon {grid.horizon} differs from problem horizon {self.horizon}"
            )
        key = (grid.horizon, grid.steps)
        if key in self._cache:
            return self._cache[key]
        n, k1, k2, d = self.dims.n, self.dims.k1, self.dims.k2, self.dims.d

        def chan(name, shape):
            mats = [_sample(c, grid, shape, f"{name}[{j}]") for j, c in enumerate(getattr(self, name))]
            return np.ascontiguousarray(np.stack(mats, axis=1))

        gd = GridData(
            grid=grid,
            dims=self.dims,
            x0=self.x0,
            A=_sample(self.A, grid, (n, n), "A"),
            B1=_sample(self.B1, grid, (n, k1), "B1"),
            B2=_sample(self.B2, grid, (n, k2), "B2"),
            C=chan("C", (n, n)),
            D1=chan("D1", (n, k1)),
            D2=chan("D2", (n, k2)),
            Q1=_sample(self.Q1, grid, (n, n), "Q1"),
            Q2=_sample(self.Q2, grid, (n, n), "Q2"),
            S1=_sample(self.S1, grid, (k1, n), "S1"),
            S2=_sample(self.S2, grid, (k2, n), "S2"),
            R1=_sample(self.R1, grid, (k1, k1), "R1"),
            R2=_sample(self.R2, grid, (k2, k2), "R2"),
            G1=self.G1,
            G2=self.G2,
        )
        for name in ("Q1", "Q2", "R1", "R2"):
            m = getattr(gd, name)
            scale = max(1.0, np.abs(m).max())
            if np.abs(m - m.swapaxes(1, 2)).max() > SYM_TOL * scale:
                raise NotSymmetric(f"{name} is not symmetric at every node")
        self._cache[key] = gd
        return gd


def _T(m):
    return m.swapaxes(-1, -2)


def _chan_sum(left, mid, right):
    """``sum_j left_j^T mid right_j`` for stacks ``(K, d, ., .)`` and ``mid (K, n, n)``."""
    return (_T(left) @ mid[:, None] @ right).sum(axis=1)


def _min_rcond_batched(m):
    s = np.linalg.svd(m, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        rc = np.where(s[..., 0] > 0, s[..., -1] / s[..., 0], 0.0)
    return rc


def _guarded_inverse_solve(m, rhs, times, floor, what):
    rc = _min_rcond_batched(m)
    i = int(np.argmin(rc))
    if rc[i] < floor:
        raise IllConditioned(
            f"{what} is not invertible at t={times[i]:.6g} (rcond {rc[i]:.3e})",
            rcond=float(rc[i]), time=float(times[i]),
        )
    return np.linalg.solve(m, rhs), float(rc.min())


@dataclass
class TildeCoefficients:
    """Closed-loop coefficients of the leader's state after the follower responds."""

    P: np.ndarray
    R1t: np.ndarray
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    Gamma: np.ndarray
    L: np.ndarray        # (B1)^T P + sum_j (D1j)^T P Cj + S1
    N12: np.ndarray      # sum_j (D1j)^T P D2j
    min_rcond: float

    def nodes(self, name):
        return getattr(self, name)[0::2]


def build_tilde(P: MatrixPath, data: ProblemData, rcond_floor: float = 1e-10) -> TildeCoefficients:
    """Tilde coefficient families on the half grid of ``P.grid``."""
    grid = P.grid
    g = data.on_grid(grid)
    Ph = enforce_symmetry(P.half())
    if Ph.shape[1:] != (data.dims.n, data.dims.n):
        raise ShapeMismatch(f"P must be n x n, got {Ph.shape[1:]}")

    R1t = enforce_symmetry(g.R1 + _chan_sum(g.D1, Ph, g.D1))
    L = _T(g.B1) @ Ph + _chan_sum(g.D1, Ph, g.C) + g.S1
    N12 = _chan_sum(g.D1, Ph, g.D2)
    rhs = np.concatenate([L, N12, _T(g.B1)], axis=2)
    sol, rc = _guarded_inverse_solve(R1t, rhs, grid.half_nodes, rcond_floor,
                                     "R1 + D1^T P D1 (A2.1)")
    n, k2 = data.dims.n, data.dims.k2
    RinvL, RinvN, RinvBt = sol[..., :n], sol[..., n:n + k2], sol[..., n + k2:]

    At = g.A - g.B1 @ RinvL
    B1t = enforce_symmetry(-g.B1 @ RinvBt)
    B2t = g.B2 - g.B1 @ RinvN
    Ct = g.C - g.D1 @ RinvL[:, None]
    D1t = -g.D1 @ RinvBt[:, None]
    D2t = g.D2 - g.D1 @ RinvN[:, None]
    Gamma = Ph @ g.B2 + _chan_sum(g.C, Ph, g.D2) - _T(L) @ RinvN
    return TildeCoefficients(Ph, R1t, At, B1t, B2t, Ct, D1t, D2t, Gamma, L, N12, rc)


@dataclass
class BarCoefficients:
    """Coefficients of the leader's two-point boundary value problem."""

    Pi: np.ndarray       # P1 + P2
    P1: np.ndarray
    P2: np.ndarray
    R2t: np.ndarray
    Q2t: np.ndarray
    S2t: np.ndarray
    S2bar: np.ndarray
    Gammabar: np.ndarray
    B1bar: np.ndarray
    B2bar: np.ndarray
    D1bar: np.ndarray
    N21: np.ndarray      # sum_j (D2j~)^T Pi D1j~
    R2inv: np.ndarray
    min_rcond: float

    def nodes(self, name):
        return getattr(self, name)[0::2]


def leader_weights(calP_half, tilde: TildeCoefficients, g: GridData, rcond_floor=1e-10):
    """``(R2~, Q2~, S2~, R2~^{-1}, min rcond)`` on the half grid from ``P1 + P2``."""
    R2t = enforce_symmetry(g.R2 + _chan_sum(tilde.D2, calP_half, tilde.D2))
    Q2t = enforce_symmetry(g.Q2 + _chan_sum(tilde.C, calP_half, tilde.C))
    S2t = g.S2 + _chan_sum(tilde.D2, calP_half, tilde.C)
    eye = np.broadcast_to(np.eye(g.dims.k2), R2t.shape)
    R2inv, rc = _guarded_inverse_solve(R2t, eye, g.grid.half_nodes, rcond_floor,
                                       "R2 + D2~^T (P1+P2) D2~ (A2.4)")
    return R2t, Q2t, S2t, enforce_symmetry(R2inv), rc


def build_bar(P1: MatrixPath, P2: MatrixPath, tilde: TildeCoefficients, data: ProblemData,
              rcond_floor: float = 1e-10) -> BarCoefficients:
    grid = P1.grid
    g = data.on_grid(grid)
    P1h = P1.half()
    P2h = P2.half()
    Pi = P1h + P2h
    R2t, Q2t, S2t, R2inv, rc = leader_weights(Pi, tilde, g, rcond_floor)

    S2bar = _T(tilde.B2) @ P1h + _chan_sum(tilde.D2, Pi, tilde.C) + g.S2
    N21 = _chan_sum(tilde.D2, Pi, tilde.D1)
    Gammabar = tilde.Gamma @ R2inv @ N21
    B1bar = P1h @ tilde.B1 + _chan_sum(tilde.C, Pi, tilde.D1) - _T(S2bar) @ R2inv @ N21
    B2bar = tilde.B1 - tilde.B2 @ R2inv @ N21
    D1bar = _chan_sum(tilde.D1, Pi, tilde.D1) - _T(N21) @ R2inv @ N21
    return BarCoefficients(Pi, P1h, P2h, R2t, Q2t, S2t, S2bar, Gammabar, B1bar, B2bar,
                           D1bar, N21, R2inv, rc)


@dataclass
class Failure:
    assumption: str
    message: str
    time: Optional[float] = None


@dataclass
class AssumptionReport:
    a22_R1_min_eig: Optional[float] = None
    a22_G1_min_eig: Optional[float] = None
    a22_schur_min_eig: Optional[float] = None
    a23_R2_min_eig: Optional[float] = None
    a23_G2_min_eig: Optional[float] = None
    a23_schur_min_eig: Optional[float] = None
    a21_min_rcond: Optional[float] = None
    a24_min_rcond: Optional[float] = None
    a25_schur_min_eig: Optional[float] = None
    det_condition_min: Optional[float] = None
    failures: list = field(default_factory=list)
    tolerances: Tolerances = DEFAULT_TOLERANCES

    def flags(self) -> dict:
        tol = self.tolerances

        def ge(v, floor):
            return None if v is None else bool(v >= floor)

        return {
            "A2.1": ge(self.a21_min_rcond, tol.rcond_floor),
            "A2.2": None if self.a22_R1_min_eig is None else bool(
                self.a22_R1_min_eig >= tol.pd_floor
                and self.a22_G1_min_eig >= tol.psd_floor
                and self.a22_schur_min_eig >= tol.schur_floor),
            "A2.3": None if self.a23_R2_min_eig is None else bool(
                self.a23_R2_min_eig >= tol.pd_floor
                and self.a23_G2_min_eig >= tol.psd_floor
                and self.a23_schur_min_eig >= tol.schur_floor),
            "A2.4": ge(self.a24_min_rcond, tol.rcond_floor),
            "A2.5": ge(self.a25_schur_min_eig, tol.schur_floor),
            "det": None if self.det_condition_min is None else bool(
                self.det_condition_min > tol.det_floor),
        }

    @property
    def passed(self) -> bool:
        return not self.failures and all(v is not False for v in self.flags().values())

    def fail(self, assumption, message, time=None):
        self.failures.append(Failure(assumption, message, time))

    def as_dict(self) -> dict:
        margins = {k: getattr(self, k) for k in (
            "a22_R1_min_eig", "a22_G1_min_eig", "a22_schur_min_eig",
            "a23_R2_min_eig", "a23_G2_min_eig", "a23_schur_min_eig",
            "a21_min_rcond", "a24_min_rcond", "a25_schur_min_eig", "det_condition_min")}
        return {
            "passed": self.passed,
            "flags": self.flags(),
            "margins": margins,
            "failures": [vars(f) for f in self.failures],
        }


def _min_eig_stack(stack, times):
    """Minimum eigenvalue over a stack of symmetric matrices, plus where it occurs."""
    ev = np.linalg.eigvalsh(enforce_symmetry(stack))[:, 0]
    i = int(np.argmin(ev))
    return float(ev[i]), float(times[i])


def schur_complement(Q, S, R):
    """``Q - S^T R^{-1} S`` for stacks (``S`` is ``k x n``)."""
    return enforce_symmetry(Q - _T(S) @ np.linalg.solve(R, S))


def validate_assumptions(data: ProblemData, grid: TimeGrid,
                         tolerances: Tolerances = DEFAULT_TOLERANCES) -> AssumptionReport:
    """Check the data-only assumptions on the follower (A2.2) and leader (A2.3) weights.

    The P-dependent checks (A2.1, A2.4, A2.5, det condition) are left unset
    and filled in by the solvers.
    """
    g = data.on_grid(grid)
    times = grid.nodes
    rep = AssumptionReport(tolerances=tolerances)
    tol = tolerances

    for tag, R, G, Q, S, player in (("a22", "R1", "G1", "Q1", "S1", "A2.2"),
                                    ("a23", "R2", "G2", "Q2", "S2", "A2.3")):
        Rn = g.nodes(R)
        r_min, r_t = _min_eig_stack(Rn, times)
        g_min = float(np.linalg.eigvalsh(getattr(g, G))[0])
        setattr(rep, f"{tag}_{R}_min_eig", r_min)
        setattr(rep, f"{tag}_{G}_min_eig", g_min)
        if r_min < tol.pd_floor:
            rep.fail(player, f"{player}: {R} not uniformly positive "
                             f"(min eigenvalue {r_min:.3e})", r_t)
            continue
        s_min, s_t = _min_eig_stack(schur_complement(g.nodes(Q), g.nodes(S), Rn), times)
        setattr(rep, f"{tag}_schur_min_eig", s_min)
        if g_min < tol.psd_floor:
            rep.fail(player, f"{player}: {G} not positive semidefinite "
                             f"(min eigenvalue {g_min:.3e})")
        if s_min < tol.schur_floor:
            rep.fail(player, f"{player}: {Q} - {S}^T {R}^-1 {S} not positive semidefinite "
                             f"(min eigenvalue {s_min:.3e})", s_t)
    return rep
