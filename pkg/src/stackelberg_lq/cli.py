"""Command line: ``check``, ``solve`` and ``verify`` on a JSON problem file.

Exit codes: 0 success, 1 mathematical or statistical failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .files import InputError, load_problem


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(pipeline.EXIT_INPUT)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stackelberg-lq",
                description="Open-loop Stackelberg equilibrium of an LQ leader-follower game.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("check", help="validate the standing assumptions")
    c.add_argument("file")

    s = sub.add_parser("solve", help="solve the deterministic pipeline and dump CSV paths")
    s.add_argument("file")
    s.add_argument("--out", required=True, help="output directory")

    v = sub.add_parser("verify", help="Monte Carlo verification of the equilibrium")
    v.add_argument("file")
    v.add_argument("--paths", type=int, default=None)
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--antithetic", action="store_true", default=None)
    v.add_argument("--perturb-self-test", action="store_true",
                   help="shift the leader control by 0.5; the stationarity gate must fail")
    v.add_argument("--out", default=None, help="also write report.json here")
    return p


def _emit(report: dict, out, timer) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=True) + "\n"
    sys.stdout.write(text)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text, encoding="utf-8")
        (out / "timings.json").write_text(json.dumps(timer.laps, indent=2) + "\n",
                                          encoding="utf-8")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    timer = pipeline.Timer()
    out = getattr(args, "out", None)
    try:
        pf = load_problem(args.file)
        if args.command == "check":
            report, code, _ = pipeline.cmd_check(pf, timer)
        elif args.command == "solve":
            report, code, _ = pipeline.cmd_solve(pf, Path(out), timer)
        else:
            if args.paths is not None and args.paths < 2:
                raise InputError("--paths must be at least 2")
            if args.seed is not None and not 0 <= args.seed < 2 ** 64:
                raise InputError("--seed must be a 64-bit unsigned integer")
            anti = args.antithetic or pf.sim.antithetic
            paths = args.paths if args.paths is not None else pf.sim.paths
            if anti and (paths % 2 or paths < 4):
                raise InputError("antithetic sampling needs an even number of paths >= 4")
            report, code, _ = pipeline.cmd_verify(pf, args.paths, args.seed, anti,
                                                  args.perturb_self_test, timer=timer)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return pipeline.EXIT_INPUT
    except Exception as exc:    # solver failures outside the assumption checks
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return pipeline.EXIT_FAIL
    _emit(report, out, timer)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
