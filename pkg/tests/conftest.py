import functools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stackelberg_lq.files import load_problem
from stackelberg_lq.follower import solve_follower
from stackelberg_lq.leader import solve_leader
from stackelberg_lq.numerics import TimeGrid

INSTANCES = Path(__file__).resolve().parent.parent / "instances"
SHIPPED = sorted(p.stem for p in INSTANCES.glob("*.json"))


def instance(name):
    return load_problem(INSTANCES / f"{name}.json")


@functools.lru_cache(maxsize=None)
def solved(name, steps=None):
    """``(data, grid, follower, leader)`` for a shipped instance."""
    pf = instance(name)
    data = pf.problem()
    grid = TimeGrid(pf.horizon, steps or pf.steps)
    fol = solve_follower(data, grid)
    return data, grid, fol, solve_leader(data, fol)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
