"""The check / solve / verify pipelines behind the command line.

Each entry point returns ``(report, exit_code)``; reports are plain dicts
ready for JSON.  Wall-clock timings are kept apart from the report so that
identical inputs give byte-identical report files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import IllConditioned, NonFinite, SolverInfeasible, StackelbergError
from .files import ProblemFile, write_csv
from .follower import FollowerSolution, riccati_residual, solve_follower
from .leader import LeaderSolution, solve_leader
from .model import AssumptionReport, validate_assumptions
from .numerics import MatrixPath
from .simulation import (FollowerDirection, SimConfig, estimate_costs, perturb_follower,
                         perturb_leader, run_monte_carlo, smooth_directions)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2

LEADER_EPS = (-0.5, -0.1, 0.1, 0.5)
FOLLOWER_EPS = (0.25, 0.5, 1.0)
LEADER_DIRECTIONS = 5
SELF_TEST_SHIFT = 0.5
CHECK_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass
class Timer:
    laps: dict = field(default_factory=dict)

    def lap(self, name, t0):
        self.laps[name] = round(time.perf_counter() - t0, 6)


@dataclass
class Solved:
    pf: ProblemFile
    report: AssumptionReport
    follower: Optional[FollowerSolution] = None
    leader: Optional[LeaderSolution] = None
    error: Optional[str] = None


def _flag_failures(rep: AssumptionReport):
    named = {f.assumption for f in rep.failures}
    for key, ok in rep.flags().items():
        if ok is False and key not in named:
            rep.fail(key, f"{key}: margin below tolerance")


def run_solvers(pf: ProblemFile, timer: Optional[Timer] = None) -> Solved:
    """Assumption checks plus the follower and leader solvers, stopping at the first failure."""
    timer = timer or Timer()
    data, grid, tol = pf.problem(), pf.grid(), pf.tolerance_config()
    rep = validate_assumptions(data, grid, tol)
    out = Solved(pf, rep)
    if rep.failures:
        return out
    t0 = time.perf_counter()
    try:
        out.follower = solve_follower(data, grid, tol.rcond_floor)
        rep.a21_min_rcond = out.follower.tilde.min_rcond
        timer.lap("follower", t0)
        t0 = time.perf_counter()
        out.leader = solve_leader(data, out.follower, tol, rep)
        timer.lap("leader", t0)
    except IllConditioned as exc:
        tag = "A2.1" if out.follower is None else "A2.4"
        rep.fail(tag, f"{tag}: {exc}", exc.time)
    except SolverInfeasible as exc:
        rep.det_condition_min = exc.det_min
        rep.fail("det", f"det condition: {exc}")
    except NonFinite as exc:
        rep.fail("numerics", str(exc))
    _flag_failures(rep)
    return out


def _first_failure(rep: AssumptionReport):
    return vars(rep.failures[0]) if rep.failures else None


def cmd_check(pf: ProblemFile, timer: Optional[Timer] = None):
    s = run_solvers(pf, timer)
    ok = s.report.passed
    report = {"schema_version": SCHEMA_VERSION, "command": "check",
              "status": "pass" if ok else "fail",
              "first_failure": _first_failure(s.report),
              "assumptions": s.report.as_dict()}
    return report, (EXIT_OK if ok else EXIT_FAIL), s


def _mat0(path: MatrixPath):
    return path.values[0].tolist()


def solve_summary(s: Solved) -> dict:
    fol, lead = s.follower, s.leader
    ric = lead.riccati
    data = s.pf.problem()
    return {
        "riccati": {
            "P_residual": riccati_residual(fol.P, data),
            "P0": _mat0(fol.P),
            "calP_decoupling_deviation": float(np.abs(
                ric.calP.values - ric.P1.values - ric.P2.values).max()),
            "coupled_deviation": ric.coupled_deviation,
            "P2_asymmetry": float(np.abs(
                ric.P2.values - ric.P2.values.swapaxes(1, 2)).max()),
        },
        "det_condition_min": lead.det_min,
        "bvp": {"terminal_residual": lead.bvp.terminal_residual,
                "Y0": lead.bvp.Y0.tolist()},
        "gains_t0": {"K_x": _mat0(fol.K_x), "K_w": _mat0(fol.K_w), "K_phi": _mat0(fol.K_phi),
                     "L_Ex": _mat0(lead.L_Ex), "L_phiStar": _mat0(lead.L_phiStar),
                     "L_Ep": _mat0(lead.L_Ep), "L_phi": _mat0(lead.L_phi)},
        "w_star_t0": lead.w_star.vec[0].tolist(),
    }


def write_dumps(s: Solved, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    fol, lead = s.follower, s.leader
    ric, bvp = lead.riccati, lead.bvp
    t = fol.grid.nodes
    dumps = {
        "P": {"P": fol.P.values}, "P1": {"P1": ric.P1.values}, "P2": {"P2": ric.P2.values},
        "calP": {"calP": ric.calP.values},
        "phi_star": {"phi_star": bvp.phi_star.vec}, "phi": {"phi": bvp.phi.vec},
        "Ex": {"Ex": bvp.Ex.vec}, "Ep": {"Ep": bvp.Ep.vec},
        "w_star": {"w_star": lead.w_star.vec},
        "gains": {"K_x": fol.K_x.values, "K_w": fol.K_w.values, "K_phi": fol.K_phi.values,
                  "L_Ex": lead.L_Ex.values, "L_phiStar": lead.L_phiStar.values,
                  "L_Ep": lead.L_Ep.values, "L_phi": lead.L_phi.values},
    }
    for name, cols in dumps.items():
        write_csv(out / f"{name}.csv", t, cols)
    return sorted(f"{name}.csv" for name in dumps)


def cmd_solve(pf: ProblemFile, out: Optional[Path] = None, timer: Optional[Timer] = None):
    report, code, s = cmd_check(pf, timer)
    report["command"] = "solve"
    if code != EXIT_OK:
        return report, code, s
    report["solution"] = solve_summary(s)
    if out is not None:
        report["files"] = write_dumps(s, Path(out))
    return report, EXIT_OK, s


def _gate(name, passed, detail):
    return {"name": name, "passed": bool(passed), "detail": detail}


def cmd_verify(pf: ProblemFile, paths: Optional[int] = None, seed: Optional[int] = None,
               antithetic: Optional[bool] = None, self_test: bool = False,
               workers: Optional[int] = None, timer: Optional[Timer] = None):
    timer = timer or Timer()
    report, code, s = cmd_solve(pf, None, timer)
    report["command"] = "verify"
    if code != EXIT_OK:
        return report, code, s
    data, grid, tol = pf.problem(), pf.grid(), pf.tolerance_config()
    sim = pf.sim
    cfg = SimConfig(paths if paths is not None else sim.paths,
                    seed if seed is not None else sim.seed,
                    sim.antithetic if antithetic is None else antithetic, grid, workers)
    fol, lead = s.follower, s.leader

    t0 = time.perf_counter()
    stats = run_monte_carlo(data, fol, lead, cfg)
    costs = estimate_costs(stats, data, cfg, fol, lead)
    idx = [int(round(f * grid.steps)) for f in CHECK_FRACTIONS]
    mf = {}
    for name, exact in (("x", lead.bvp.Ex.vec), ("p", lead.bvp.Ep.vec)):
        se = stats.se(name)[idx]
        gap = np.abs(stats.mean(name)[idx] - exact[idx])
        mf[name] = {"nodes": grid.nodes[idx].tolist(), "max_gap": float(gap.max()),
                    "max_gap_se": float(np.max(np.where(se > 0, gap / np.where(se > 0, se, 1), 0)))}
    timer.lap("monte_carlo", t0)

    t0 = time.perf_counter()
    base = lead.w_star
    if self_test:
        base = MatrixPath(grid, base.values + SELF_TEST_SHIFT, base.mid + SELF_TEST_SHIFT)
    dirs = smooth_directions(grid, data.dims.k2, LEADER_DIRECTIONS, seed=cfg.seed)
    lp = perturb_leader(data, fol, lead, dirs, LEADER_EPS, cfg, w_base=base)
    timer.lap("perturb_leader", t0)

    t0 = time.perf_counter()
    k1 = data.dims.k1
    g = np.ones((grid.steps + 1, k1)) * (1.0 + grid.nodes / grid.horizon)[:, None]
    fdirs = [FollowerDirection("deterministic", g),
             FollowerDirection("brownian", np.ones((grid.steps + 1, k1)), 0)]
    fp = perturb_follower(data, fol, lead.w_star, fdirs, FOLLOWER_EPS, cfg)
    timer.lap("perturb_follower", t0)

    k_st, k_cv, k_val = tol.stationarity_se, tol.convexity_se, tol.value_se
    gates = [
        _gate("value_formula", costs.value_gap_se <= k_val,
              f"|J1_mc - J1_formula| = {costs.value_gap_se:.3g} SE (limit {k_val:g})"),
        _gate("leader_stationarity", lp.stationary(k_st),
              "max |dJ2/deps| / SE = " + _worst_ratio(lp)),
        _gate("leader_convexity", lp.convex(k_cv), "dJ2 >= -k SE for all eps"),
        _gate("follower_stationarity", costs.stationarity_follower <= 1e-9,
              f"pathwise relative residual {costs.stationarity_follower:.3g}"),
        _gate("follower_convexity", fp.convex(k_cv), "dJ1 >= -k SE for all eps"),
        _gate("follower_quadratic", fp.quadratic(),
              "dJ1(2 eps) / dJ1(eps) in [3.5, 4.5]"),
    ]
    failed = [gt["name"] for gt in gates if not gt["passed"]]
    report.update({
        "status": "pass" if not failed else "fail",
        "first_failed_gate": failed[0] if failed else None,
        "simulation": {"paths": cfg.paths, "seed": cfg.seed, "antithetic": cfg.antithetic,
                       "steps": grid.steps, "self_test": self_test},
        "costs": costs.as_dict(),
        "mean_field_consistency": mf,
        "perturbation": {"leader": lp.as_dict(), "follower": fp.as_dict()},
        "gates": gates,
    })
    return report, (EXIT_OK if not failed else EXIT_FAIL), s


def _worst_ratio(rep) -> str:
    vals = [abs(d.derivative) / d.derivative_se if d.derivative_se else 0.0
            for d in rep.directions if d.derivative is not None]
    return f"{max(vals, default=0.0):.3g}"


def classify(exc: Exception) -> int:
    return EXIT_FAIL if isinstance(exc, StackelbergError) else EXIT_INPUT
