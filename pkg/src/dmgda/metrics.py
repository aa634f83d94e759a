"""Per-iteration diagnostics and log-log rate fitting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .problems import OracleError, ProblemInstance

CSV_FIELDS = (
    "t", "stationarity", "consensus_x", "consensus_y", "tracking_dev_x",
    "tracking_dev_y", "residual", "dual_dist", "grad_calls",
)


@dataclass(frozen=True)
class MetricsRecord:
    t: int
    stationarity: float
    consensus_x: float
    consensus_y: float
    tracking_dev_x: float
    tracking_dev_y: float
    residual: float
    dual_dist: float
    grad_calls: int
    stationarity_node_max: float = float("nan")
    flagged: bool = False

    def csv_row(self) -> str:
        vals = []
        for name in CSV_FIELDS:
            v = getattr(self, name)
            vals.append(str(v) if name in ("t", "grad_calls") else format(float(v), ".17g"))
        return ",".join(vals)


def consensus(v: np.ndarray) -> float:
    """Mean squared distance of node rows from their average."""
    return float(np.mean(np.sum((v - v.mean(axis=0)) ** 2, axis=1)))


def measure(state, problem: ProblemInstance, W=None) -> MetricsRecord:
    """Diagnostics for one state. Pure: the state is only read.

    An inner-maximizer failure yields a record with ``flagged=True`` and NaN in
    the oracle-dependent fields instead of an exception.
    """
    x_bar, y_bar = state.x_bar, state.y_bar
    ux, uy = state.u_x.mean(axis=0), state.u_y.mean(axis=0)
    common = dict(
        t=int(state.t),
        consensus_x=consensus(state.x),
        consensus_y=consensus(state.y),
        tracking_dev_x=float(np.linalg.norm(ux - state.w_x.mean(axis=0))),
        tracking_dev_y=float(np.linalg.norm(uy - state.w_y.mean(axis=0))),
        grad_calls=int(state.grad_calls.sum()),
    )
    nan = float("nan")
    try:
        F_val, gF, _ = problem.oracle_F(x_bar)
        node_max = max(float(np.linalg.norm(problem.oracle_F(xi).grad)) for xi in state.x)
    except OracleError:
        return MetricsRecord(stationarity=nan, residual=nan, dual_dist=nan,
                             stationarity_node_max=nan, flagged=True, **common)
    dist = problem.argmax_distance(x_bar, y_bar)
    return MetricsRecord(
        stationarity=float(np.linalg.norm(gF)),
        residual=float(F_val - problem.objective(x_bar, y_bar)),
        dual_dist=nan if dist is None else dist,
        stationarity_node_max=node_max,
        **common,
    )


def trajectory_mean(records: Sequence[MetricsRecord]) -> float:
    """Average stationarity over recorded iterations ``t >= 1``."""
    vals = [r.stationarity for r in records if r.t >= 1]
    if not vals:
        vals = [r.stationarity for r in records]
    return float(np.mean(vals))


class RateFit(NamedTuple):
    slope: float
    intercept: float
    r2: float


def rate_fit(samples: Iterable[tuple[float, float]]) -> RateFit:
    """Ordinary least squares of ``log(stationarity)`` on ``log(T)``."""
    arr = np.asarray(list(samples), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
        raise ValueError("rate_fit needs at least 3 (T, value) pairs")
    T, v = arr[:, 0], arr[:, 1]
    if np.unique(T).size != T.size:
        raise ValueError("T values must be distinct")
    if np.any(T <= 0) or np.any(v <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("T and values must be positive and finite")
    lx, ly = np.log(T), np.log(v)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(float(slope), float(intercept), float(r2))


def default_cadence(T: int) -> int:
    return 1 if T <= 10_000 else 10


def write_csv(records: Iterable[MetricsRecord], path) -> None:
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        fh.write(",".join(CSV_FIELDS) + "\n")
        for rec in records:
            fh.write(rec.csv_row() + "\n")


__all__ = [
    "MetricsRecord", "CSV_FIELDS", "measure", "rate_fit", "RateFit", "trajectory_mean",
    "default_cadence", "write_csv", "consensus",
]
