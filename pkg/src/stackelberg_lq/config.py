"""Numerical tolerances shared by the solvers, the CLI and the gates."""

from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class Tolerances:
    pd_floor: float = 1e-8          # R1, R2 uniformly positive definite
    psd_floor: float = -1e-12       # G1, G2 positive semidefinite
    schur_floor: float = -1e-10     # Q - S^T R^-1 S >= 0, also used for A2.5
    rcond_floor: float = 1e-10      # every guarded inversion
    det_floor: float = 1e-8         # BVP solvability determinant
    stationarity_se: float = 2.0    # leader / follower first-order gates
    convexity_se: float = 2.0
    value_se: float = 3.0           # value formula vs Monte Carlo

    def as_dict(self):
        return asdict(self)

    def updated(self, overrides=None):
        if not overrides:
            return self
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown tolerance(s): {sorted(unknown)}")
        return replace(self, **{k: float(v) for k, v in overrides.items()})


DEFAULT_TOLERANCES = Tolerances()
