"""Exception types raised by the solvers."""


class StackelbergError(Exception):
    """Base class for all solver errors."""


class NonFinite(StackelbergError):
    """An integration stage or simulated path produced NaN/Inf."""


class IllConditioned(StackelbergError):
    """A matrix that must be inverted is (numerically) singular."""

    def __init__(self, message, rcond=None, time=None):
        super().__init__(message)
        self.rcond = rcond
        self.time = time


class NotSymmetric(StackelbergError):
    pass


class ShapeMismatch(StackelbergError):
    pass


class SolverInfeasible(StackelbergError):
    """The two-point boundary value problem fails its solvability condition."""

    def __init__(self, message, det_min=None):
        super().__init__(message)
        self.det_min = det_min
