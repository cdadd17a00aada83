"""Open-loop Stackelberg equilibrium of a linear-quadratic leader-follower game.

The leader picks a deterministic control, the follower an adapted stochastic
one.  Solvers for both players live in :mod:`.follower` and :mod:`.leader`;
:mod:`.simulation` checks the result by Monte Carlo.
"""

from .config import DEFAULT_TOLERANCES, Tolerances
from .errors import (IllConditioned, NonFinite, NotSymmetric, ShapeMismatch, SolverInfeasible,
                     StackelbergError)
from .follower import FollowerSolution, follower_value, solve_follower, solve_phi
from .leader import LeaderSolution, solve_leader
from .model import Dims, ProblemData, validate_assumptions
from .numerics import MatrixPath, TimeGrid

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_TOLERANCES", "Tolerances", "IllConditioned", "NonFinite", "NotSymmetric",
    "ShapeMismatch", "SolverInfeasible", "StackelbergError", "FollowerSolution",
    "follower_value", "solve_follower", "solve_phi", "LeaderSolution", "solve_leader",
    "Dims", "ProblemData", "validate_assumptions", "MatrixPath", "TimeGrid",
]
