"""Problem files (JSON) and CSV dumps of time-indexed paths."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .config import DEFAULT_TOLERANCES, Tolerances
from .errors import StackelbergError
from .model import Dims, ProblemData
from .numerics import TimeGrid

Matrix = List[List[float]]


class InputError(Exception):
    """The problem file cannot be read or does not describe a valid game."""


class DimsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    n: int = Field(ge=1)
    k1: int = Field(ge=1)
    k2: int = Field(ge=1)
    d: int = Field(ge=1)


class SimSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    paths: int = Field(default=10000, ge=2)
    seed: int = Field(default=42, ge=0, lt=2 ** 64)
    antithetic: bool = False


class ProblemFile(BaseModel):
    """Constant-coefficient game as stored on disk (matrices row-major)."""

    model_config = ConfigDict(extra="forbid")
    dims: DimsSection
    horizon: float = Field(gt=0, allow_inf_nan=False)
    steps: int = Field(ge=1)
    x0: List[float]
    A: Matrix
    B1: Matrix
    B2: Matrix
    C: List[Matrix]
    D1: List[Matrix]
    D2: List[Matrix]
    Q1: Matrix
    S1: Matrix
    R1: Matrix
    G1: Matrix
    Q2: Matrix
    S2: Matrix
    R2: Matrix
    G2: Matrix
    sim: SimSection = Field(default_factory=SimSection)
    tolerances: Dict[str, float] = Field(default_factory=dict)

    @field_validator("tolerances")
    @classmethod
    def _known_tolerances(cls, v):
        DEFAULT_TOLERANCES.updated(v)
        return v

    def problem(self) -> ProblemData:
        d = self.dims
        try:
            return ProblemData(
                Dims(d.n, d.k1, d.k2, d.d), self.horizon, self.x0,
                A=_mat(self.A, "A"), B1=_mat(self.B1, "B1"), B2=_mat(self.B2, "B2"),
                C=[_mat(m, f"C[{j}]") for j, m in enumerate(self.C)],
                D1=[_mat(m, f"D1[{j}]") for j, m in enumerate(self.D1)],
                D2=[_mat(m, f"D2[{j}]") for j, m in enumerate(self.D2)],
                Q1=_mat(self.Q1, "Q1"), Q2=_mat(self.Q2, "Q2"),
                S1=_mat(self.S1, "S1"), S2=_mat(self.S2, "S2"),
                R1=_mat(self.R1, "R1"), R2=_mat(self.R2, "R2"),
                G1=_mat(self.G1, "G1"), G2=_mat(self.G2, "G2"),
            )
        except (StackelbergError, ValueError) as exc:
            raise InputError(str(exc)) from exc

    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps)

    def tolerance_config(self) -> Tolerances:
        return DEFAULT_TOLERANCES.updated(self.tolerances)

    @classmethod
    def from_problem(cls, data: ProblemData, steps: int, sim: Optional[SimSection] = None,
                     tolerances: Optional[dict] = None) -> "ProblemFile":
        """Inverse of :meth:`problem` for constant-coefficient data."""
        def m(a):
            a = np.asarray(a, dtype=float)
            if a.ndim != 2:
                raise InputError("only constant coefficients can be written to a problem file")
            return a.tolist()

        dm = data.dims
        return cls(
            dims=DimsSection(n=dm.n, k1=dm.k1, k2=dm.k2, d=dm.d), horizon=data.horizon,
            steps=steps, x0=data.x0.tolist(), A=m(data.A), B1=m(data.B1), B2=m(data.B2),
            C=[m(c) for c in data.C], D1=[m(c) for c in data.D1], D2=[m(c) for c in data.D2],
            Q1=m(data.Q1), S1=m(data.S1), R1=m(data.R1), G1=m(data.G1),
            Q2=m(data.Q2), S2=m(data.S2), R2=m(data.R2), G2=m(data.G2),
            sim=sim or SimSection(), tolerances=dict(tolerances or {}),
        )


def _mat(rows, name) -> np.ndarray:
    widths = {len(r) for r in rows}
    if not rows or len(widths) != 1:
        raise InputError(f"{name} must be a non-empty rectangular matrix")
    a = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} has non-finite entries")
    return a


def parse_problem(text: str) -> ProblemFile:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON: {exc}") from exc
    try:
        pf = ProblemFile.model_validate(raw)
    except ValidationError as exc:
        raise InputError(f"invalid problem file: {exc}") from exc
    try:
        pf.problem().on_grid(pf.grid())     # surface shape/symmetry errors now
    except (StackelbergError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    return pf


def load_problem(path) -> ProblemFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    return parse_problem(text)


def dump_problem(pf: ProblemFile) -> str:
    return json.dumps(pf.model_dump(), indent=2) + "\n"


def format_float(v: float) -> str:
    return "%.17g" % v


def path_columns(name: str, values: np.ndarray) -> List[str]:
    """Column names for a node array ``(N+1, r)`` or ``(N+1, r, c)``."""
    if values.ndim == 2:
        return [f"{name}[{i}]" for i in range(values.shape[1])]
    return [f"{name}[{i},{j}]" for i in range(values.shape[1]) for j in range(values.shape[2])]


def write_csv(path, times: np.ndarray, columns: Dict[str, np.ndarray]) -> None:
    """One row per node: ``t`` followed by every entry of every named path."""
    header = ["t"]
    blocks = [np.asarray(times, dtype=float)[:, None]]
    for name, values in columns.items():
        values = np.asarray(values, dtype=float)
        header += path_columns(name, values)
        blocks.append(values.reshape(values.shape[0], -1))
    table = np.hstack(blocks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in table:
            wr.writerow([format_float(v) for v in row])


def read_csv(path):
    """``(header, array)`` from a file written by :func:`write_csv`."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def problem_equal(a: ProblemData, b: ProblemData, names: Sequence[str] = (
        "x0", "A", "B1", "B2", "Q1", "Q2", "S1", "S2", "R1", "R2", "G1", "G2")) -> bool:
    if a.dims != b.dims or a.horizon != b.horizon:
        return False
    for nm in names:
        if not np.array_equal(np.asarray(getattr(a, nm)), np.asarray(getattr(b, nm))):
            return False
    for nm in ("C", "D1", "D2"):
        if not all(np.array_equal(np.asarray(x), np.asarray(y))
                   for x, y in zip(getattr(a, nm), getattr(b, nm))):
            return False
    return True
