"""Verification harness: checks the algorithm's deterministic invariants on live
trajectories and the problem's certified constants, and collects a report."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import certificates
from .algorithm import AlgoConfig, SwarmState, schedule
from .certificates import CheckResult
from .problems import ProblemInstance
from .topology import MixingMatrix, spectral_gap

TRACKING_RTOL = 1e-10
SLACK_ABS = 1e-10
SLACK_REL = 1e-10

REGISTERED_CHECKS = (
    "tracking",
    "consensus_recursions",
    "problem_certificates",
    "lemma1_constant",
    "stationarity_oracle",
)


class TrajectoryRecorder:
    """Observer for ``algorithm.run`` that keeps a copy of every state."""

    def __init__(self):
        self.states: list[SwarmState] = []

    def __call__(self, state: SwarmState) -> None:
        self.states.append(state.copy())


@dataclass
class VerificationReport:
    results: dict[str, CheckResult] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def add(self, result: CheckResult) -> None:
        if result.name in self.results:
            raise ValueError(f"check {result.name!r} already recorded")
        self.results[result.name] = result

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [r.to_dict() for r in self.results.values()],
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)

    def to_text(self) -> str:
        lines = []
        for r in self.results.values():
            lines.append(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: worst={r.worst:.6g}"
                         + (f" at {r.location}" if r.location else "") + (f"  ({r.detail})" if r.detail else ""))
            for c in r.children:
                lines.append(f"    [{'PASS' if c.passed else 'FAIL'}] {c.name}: worst={c.worst:.6g}  ({c.detail})")
        for w in self.warnings:
            lines.append(f"[WARN] {w}")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"


def _json_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


def check_tracking(trajectory: list[SwarmState], rtol: float = TRACKING_RTOL) -> CheckResult:
    """Mean of the trackers equals mean of the momentum estimates, both blocks, every t.

    On failure the location is the first violating iteration; otherwise the worst one.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    worst, where, first = 0.0, None, None
    for s in trajectory:
        for block, u, w in (("x", s.u_x, s.w_x), ("y", s.u_y, s.w_y)):
            ubar = u.mean(axis=0)
            dev = float(np.linalg.norm(ubar - w.mean(axis=0)) / (1.0 + np.linalg.norm(ubar)))
            if dev > worst or where is None:
                worst, where = dev, {"t": int(s.t), "block": block}
            if first is None and dev > rtol:
                first = {"t": int(s.t), "block": block}
    detail = f"max ||u_bar - w_bar|| / (1 + ||u_bar||), tolerance {rtol}"
    if first is not None:
        detail += f"; worst at t={where['t']}"
    return CheckResult("tracking", first is None, worst, first or where, detail)


def _sq_dev(v):
    return float(np.sum((v - v.mean(axis=0)) ** 2))


def check_consensus_recursions(trajectory: list[SwarmState], W, config: AlgoConfig,
                               nu: float | None = None) -> CheckResult:
    """Per-step consensus contraction and tilde-displacement bounds, both blocks.

    ``worst`` is the most negative slack ``rhs - lhs``; the check passes when it is
    no lower than ``-(1e-10 + 1e-10 * rhs)``. ``nu`` overrides the measured value,
    which is how a misparameterized bound is exercised.
    """
    if config.gamma is None or config.lam is None:
        raise ValueError("config must be resolved (gamma and lam set)")
    nu_measured = 0.0 if W is None else spectral_gap(W)
    nu = nu_measured if nu is None else nu
    weights = W.weights if isinstance(W, MixingMatrix) else (np.ones((1, 1)) if W is None else np.asarray(W))
    one_m = 1.0 - nu**2
    worst, where, failed = np.inf, None, False
    n_checked = 0
    for prev, cur in zip(trajectory[:-1], trajectory[1:]):
        if cur.t != prev.t + 1:
            continue
        eta = schedule(config, prev.t)[0]
        for block, step_size, a, a_new, w, tilde in (
            ("x", config.gamma, prev.x, cur.x, prev.w_x, cur.x_tilde),
            ("y", config.lam, prev.y, cur.y, prev.w_y, cur.y_tilde),
        ):
            if tilde is None:
                sign = -1.0 if block == "x" else 1.0
                tilde = weights @ a + sign * step_size * w
            cons, cons_new, w_dev = _sq_dev(a), _sq_dev(a_new), _sq_dev(w)
            w_sq = float(np.sum(w**2))
            bounds = (
                ("contraction", cons_new,
                 (1 - one_m * eta / 2) * cons + 2 * eta * step_size**2 / one_m * w_dev),
                ("displacement", float(np.sum((tilde - a) ** 2)),
                 (3 + nu**2) * cons + 2 * (1 + nu**2) / one_m * step_size**2 * w_sq),
            )
            for kind, lhs, rhs in bounds:
                n_checked += 1
                slack = rhs - lhs
                if slack < -(SLACK_ABS + SLACK_REL * abs(rhs)):
                    failed = True
                if slack < worst:
                    worst, where = slack, {"t": int(prev.t), "block": block, "inequality": kind}
    if not np.isfinite(worst):
        worst = 0.0
    detail = f"nu_used={nu:.6g}, nu_measured={nu_measured:.6g}, {n_checked} inequalities"
    if failed and abs(nu - nu_measured) > 1e-12:
        detail += "; violation under a nu different from the measured one (parameterization, not iterates)"
    elif failed:
        detail += "; violation with measured nu indicates an implementation defect"
    return CheckResult("consensus_recursions", not failed, float(worst), where, detail)


def check_problem_certificates(problem: ProblemInstance, n_samples: int = 1000, seed: int = 0) -> CheckResult:
    children = certificates.all_certificates(problem, n_samples, seed)
    bad = [c for c in children if not c.passed]
    return CheckResult("problem_certificates", not bad, float(len(bad)), None,
                       f"{len(children) - len(bad)}/{len(children)} certificates hold", children)


def check_lemma1_constant(problem: ProblemInstance, n_samples: int = 1000, seed: int = 0,
                          L: float | None = None) -> CheckResult:
    return certificates.lipschitz_F(problem, n_samples, seed, L)


def check_stationarity_oracle(problem: ProblemInstance, x, h: float = 1e-5, rtol: float = 1e-5) -> CheckResult:
    """Compare ``||grad F(x)||`` with the norm of a central-difference gradient of ``F``."""
    x = np.asarray(x, dtype=float)
    g = problem.oracle_F(x).grad
    fd = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        fd[k] = (problem.oracle_F(x + e).value - problem.oracle_F(x - e).value) / (2 * h)
    a, b = np.linalg.norm(g), np.linalg.norm(fd)
    err = float(abs(a - b) / max(1.0, a))
    return CheckResult("stationarity_oracle", err <= rtol, err, None,
                       f"|stationarity - ||fd grad F||| / max(1, stationarity), h={h}")


def verify_run(trajectory: list[SwarmState], problem: ProblemInstance, W, config: AlgoConfig,
               n_samples: int = 1000, seed: int = 0, warnings: list[str] = ()) -> VerificationReport:
    """Run every registered check and return the report."""
    config = config.resolve(problem.constants)
    report = VerificationReport(warnings=list(warnings))
    report.add(check_tracking(trajectory))
    report.add(check_consensus_recursions(trajectory, W, config))
    report.add(check_problem_certificates(problem, n_samples, seed))
    report.add(check_lemma1_constant(problem, n_samples, seed))
    report.add(check_stationarity_oracle(problem, trajectory[-1].x_bar))
    return report
