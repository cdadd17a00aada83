"""Dense matrix ODE integration on a uniform grid, plus guarded linear algebra.

Every solution in the package lives on a :class:`TimeGrid` as a
:class:`MatrixPath`.  RK4 needs coefficients at the half-nodes as well as
the nodes, so paths may also carry midpoint values; coefficient arrays that
feed an RK4 field are kept on the interleaved "half grid" of ``2N + 1``
points (node, midpoint, node, ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import IllConditioned, NonFinite, NotSymmetric, ShapeMismatch

DEFAULT_RCOND_FLOOR = 1e-10

Field = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @property
    def mids(self) -> np.ndarray:
        return (np.arange(self.steps) + 0.5) * self.dt

    @property
    def half_nodes(self) -> np.ndarray:
        return np.arange(2 * self.steps + 1) * (0.5 * self.dt)

    def half_index(self, t: float) -> int:
        """Index of ``t`` on the half grid (``2i`` for node i, ``2i+1`` for its midpoint)."""
        k = int(round(2.0 * t / self.dt))
        return min(max(k, 0), 2 * self.steps)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)


class MatrixPath:
    """Matrix-valued function sampled at the nodes of a grid.

    ``values`` has shape ``(N + 1, rows, cols)``.  ``mid`` optionally holds
    the values at the interval midpoints, shape ``(N, rows, cols)``.
    """

    def __init__(self, grid: TimeGrid, values, mid=None):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or values.shape[0] != grid.steps + 1:
            raise ShapeMismatch(
                f"expected ({grid.steps + 1}, r, c) node values, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise NonFinite("MatrixPath values contain NaN/Inf")
        if mid is not None:
            mid = np.asarray(mid, dtype=float)
            if mid.shape != (grid.steps,) + values.shape[1:]:
                raise ShapeMismatch(f"midpoint values have shape {mid.shape}")
        self.grid = grid
        self.values = values
        self.mid = mid

    @property
    def rows(self) -> int:
        return self.values.shape[1]

    @property
    def cols(self) -> int:
        return self.values.shape[2]

    @property
    def vec(self) -> np.ndarray:
        """Node values of a column-vector path as an ``(N + 1, rows)`` array."""
        if self.cols != 1:
            raise ShapeMismatch("vec is only defined for column-vector paths")
        return self.values[:, :, 0]

    @classmethod
    def from_vectors(cls, grid: TimeGrid, vectors, mid=None) -> "MatrixPath":
        vectors = np.asarray(vectors, dtype=float)
        return cls(grid, vectors[:, :, None], None if mid is None else np.asarray(mid)[:, :, None])

    def __getitem__(self, i):
        return self.values[i]

    def __len__(self):
        return self.values.shape[0]

    def half(self) -> np.ndarray:
        """Interleaved node/midpoint samples, shape ``(2N + 1, rows, cols)``.

        Missing midpoints are filled by linear interpolation.
        """
        mid = self.mid
        if mid is None:
            mid = 0.5 * (self.values[:-1] + self.values[1:])
        out = np.empty((2 * self.grid.steps + 1,) + self.values.shape[1:])
        out[0::2] = self.values
        out[1::2] = mid
        return out

    @classmethod
    def from_half(cls, grid: TimeGrid, half_values) -> "MatrixPath":
        half_values = np.asarray(half_values, dtype=float)
        return cls(grid, half_values[0::2], half_values[1::2])

    @classmethod
    def constant(cls, grid: TimeGrid, matrix) -> "MatrixPath":
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(
            grid,
            np.broadcast_to(m, (grid.steps + 1,) + m.shape).copy(),
            np.broadcast_to(m, (grid.steps,) + m.shape).copy(),
        )

    def __add__(self, other: "MatrixPath") -> "MatrixPath":
        mid = None
        if self.mid is not None and other.mid is not None:
            mid = self.mid + other.mid
        return MatrixPath(self.grid, self.values + other.values, mid)

    def __sub__(self, other: "MatrixPath") -> "MatrixPath":
        mid = None
        if self.mid is not None and other.mid is not None:
            mid = self.mid - other.mid
        return MatrixPath(self.grid, self.values - other.values, mid)


def _check_finite(m, t):
    # a single reduction is much cheaper than isfinite().all() on tiny arrays
    if not math.isfinite(float(m.sum())):
        raise NonFinite(f"integration produced non-finite values near t={t:.6g}")


def rk4_integrate(
    field: Field,
    boundary,
    direction: str,
    grid: TimeGrid,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    midpoints: bool = False,
) -> MatrixPath:
    """Classical fourth-order Runge-Kutta on the nodes of ``grid``.

    ``direction="backward"`` pins the value at ``t_N`` to ``boundary`` and
    marches towards 0; ``"forward"`` pins ``t_0``.  ``project`` is applied to
    the state after every step (e.g. symmetrisation).  With ``midpoints=True``
    the returned path also carries cubic-Hermite midpoint values built from
    the field's derivative at the nodes, which keeps fourth-order accuracy
    when the path is later used as an RK4 coefficient.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    y = np.atleast_2d(np.asarray(boundary, dtype=float)).copy()
    if project is not None:
        y = project(y)
    n = grid.steps
    h = grid.dt
    nodes = grid.nodes.tolist()
    mids = grid.mids.tolist()
    out = np.empty((n + 1,) + y.shape)
    deriv = np.empty_like(out)

    if direction == "backward":
        out[n] = y
        for i in range(n - 1, -1, -1):
            k1 = field(nodes[i + 1], y)
            if k1.shape != y.shape:
                raise ShapeMismatch(f"field returned {k1.shape}, state is {y.shape}")
            deriv[i + 1] = k1
            k2 = field(mids[i], y - 0.5 * h * k1)
            k3 = field(mids[i], y - 0.5 * h * k2)
            k4 = field(nodes[i], y - h * k3)
            y = y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if project is not None:
                y = project(y)
            _check_finite(y, nodes[i])
            out[i] = y
        last = 0
    else:
        out[0] = y
        for i in range(n):
            k1 = field(nodes[i], y)
            if k1.shape != y.shape:
                raise ShapeMismatch(f"field returned {k1.shape}, state is {y.shape}")
            deriv[i] = k1
            k2 = field(mids[i], y + 0.5 * h * k1)
            k3 = field(mids[i], y + 0.5 * h * k2)
            k4 = field(nodes[i + 1], y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if project is not None:
                y = project(y)
            _check_finite(y, nodes[i + 1])
            out[i + 1] = y
        last = n

    mid = None
    if midpoints:
        deriv[last] = field(nodes[last], out[last])
        mid = 0.5 * (out[:-1] + out[1:]) + (h / 8.0) * (deriv[:-1] - deriv[1:])
        if project is not None:
            mid = project(mid)
    return MatrixPath(grid, out, mid)


def transition_matrix(system: MatrixPath, grid: TimeGrid) -> MatrixPath:
    """State transition matrix of ``dPhi/dt = A_t Phi`` with ``Phi(0) = I``."""
    if system.rows != system.cols:
        raise ShapeMismatch("transition_matrix needs square system matrices")
    coeffs = system.half()

    def field(t, phi):
        return coeffs[grid.half_index(t)] @ phi

    return rk4_integrate(field, np.eye(system.rows), "forward", grid)


def rcond(m) -> float:
    """Reciprocal 2-norm condition number (0 for singular input)."""
    m = np.asarray(m, dtype=float)
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0.0 or not np.isfinite(s[0]):
        return 0.0
    return float(s[-1] / s[0])


def solve_linear(m, rhs, rcond_floor: float = DEFAULT_RCOND_FLOOR) -> np.ndarray:
    """Solve ``m @ x = rhs`` after checking the conditioning of ``m``."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    rhs = np.asarray(rhs, dtype=float)
    if m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"solve_linear needs a square matrix, got {m.shape}")
    if rhs.shape[0] != m.shape[0]:
        raise ShapeMismatch(f"rhs has {rhs.shape[0]} rows, matrix has {m.shape[0]}")
    rc = rcond(m)
    if rc < rcond_floor:
        raise IllConditioned(
            f"matrix reciprocal condition {rc:.3e} below floor {rcond_floor:.1e}", rcond=rc
        )
    return np.linalg.solve(m, rhs)


def enforce_symmetry(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.swapaxes(-1, -2))


def min_eigenvalue(m, tol: float = 1e-12) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    scale = max(np.abs(m).max(initial=0.0), 1.0)
    if np.abs(m - m.T).max(initial=0.0) > tol * scale:
        raise NotSymmetric("matrix is not symmetric within tolerance")
    return float(np.linalg.eigvalsh(enforce_symmetry(m))[0])


def trapezoid(values, dt: float, axis: int = 0) -> np.ndarray:
    """Composite trapezoid rule on uniformly spaced samples along ``axis``."""
    values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    return dt * (values.sum(axis=0) - 0.5 * (values[0] + values[-1]))
