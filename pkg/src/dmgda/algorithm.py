"""Decentralized momentum gradient descent ascent (DM-GDA).

Each node keeps its iterate ``(x_i, y_i)``, a STORM-style momentum gradient
estimate ``(u_x_i, u_y_i)`` and a gradient tracker ``(w_x_i, w_y_i)``. One
iteration mixes iterates with the neighbours, takes a damped descent/ascent step
along the tracker, refreshes the momentum estimate with one fresh sample
evaluated at both the new and the old point, and mixes the tracker update.
"""
from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .problems import ProblemConstants, ProblemInstance
from .topology import MixingMatrix, build_mixing

SCHEDULE_MODES = ("theorem1", "constant", "custom")
BASELINES = ("dmgda", "dsgda_gt")
GRADS_PER_STEP = 4
NOISE_BLOCK = 512


class FeasibilityWarning(UserWarning):
    """Step sizes fall outside the range the convergence analysis assumes."""


class DivergenceError(FloatingPointError):
    """A non-finite value appeared in the iterates."""

    def __init__(self, t: int, node: int, state: "SwarmState | None" = None):
        super().__init__(f"non-finite iterate at t={t}, node {node}")
        self.t = t
        self.node = node
        self.state = state
        self.records: list = []


@dataclass(frozen=True)
class AlgoConfig:
    """Run parameters.

    ``gamma``/``lam`` left as ``None`` are filled by ``resolve``: ``lam = min(1,
    1/(2 L_f eta_max))`` and ``gamma = lam mu / (16 L)``. In ``constant`` mode the
    three scales are the schedule values themselves.
    """

    T: int = 1000
    gamma: float | None = None
    lam: float | None = None
    eta_scale: float = 1.0
    alpha_scale: float = 1.0
    beta_scale: float = 1.0
    schedule_mode: str = "theorem1"
    seed: int = 0
    baseline: str = "dmgda"
    custom_schedule: Callable[[int], tuple[float, float, float]] | None = field(
        default=None, compare=False, repr=False
    )

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 0:
            raise ValueError(f"T must be a nonnegative integer, got {self.T!r}")
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ValueError(f"schedule_mode must be one of {SCHEDULE_MODES}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.schedule_mode == "custom" and self.custom_schedule is None:
            raise ValueError("custom schedule_mode needs custom_schedule")
        for name in ("eta_scale", "alpha_scale", "beta_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    def eta_max(self) -> float:
        if self.schedule_mode == "custom":
            return max(schedule(self, t)[0] for t in range(max(self.T, 1) + 1))
        return schedule(self, 1)[0]

    def resolve(self, constants: ProblemConstants) -> "AlgoConfig":
        lam = self.lam
        if lam is None:
            lam = min(1.0, 1.0 / (2.0 * constants.L_f * self.eta_max()))
        gamma = self.gamma
        if gamma is None:
            gamma = lam * constants.mu / (16.0 * constants.L)
        return replace(self, gamma=float(gamma), lam=float(lam))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("custom_schedule")
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "AlgoConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        return cls(**doc)


def schedule(config: AlgoConfig, t: int) -> tuple[float, float, float]:
    """Return ``(eta_t, alpha_t, beta_t)``, each clamped to ``(0, 1]``."""
    if config.schedule_mode == "theorem1":
        T = max(config.T, 1)
        eta = config.eta_scale * T ** (-1.0 / 3.0)
        alpha = config.alpha_scale * T ** (-2.0 / 3.0)
        beta = config.beta_scale * T ** (-2.0 / 3.0)
    elif config.schedule_mode == "constant":
        eta, alpha, beta = config.eta_scale, config.alpha_scale, config.beta_scale
    else:
        eta, alpha, beta = config.custom_schedule(t)
        if min(eta, alpha, beta) <= 0:
            raise ValueError(f"custom schedule returned nonpositive value at t={t}")
    if config.baseline == "dsgda_gt":
        alpha = beta = 1.0
    return min(1.0, eta), min(1.0, alpha), min(1.0, beta)


def make_baseline_dsgda(config: AlgoConfig) -> AlgoConfig:
    """Gradient-tracking SGDA: the same update with momentum switched off (alpha = beta = 1)."""
    return replace(config, baseline="dsgda_gt")


def check_feasibility(config: AlgoConfig, constants: ProblemConstants) -> list[str]:
    """Messages for every violated step-size precondition; warns once per message."""
    cfg = config.resolve(constants)
    eta_max = cfg.eta_max()
    msgs = []
    gamma_cap = cfg.lam * constants.mu / (16.0 * constants.L)
    if cfg.gamma > gamma_cap * (1 + 1e-12):
        msgs.append(f"gamma={cfg.gamma:.6g} exceeds lambda*mu/(16 L)={gamma_cap:.6g}")
    lam_cap = 1.0 / (2.0 * constants.L_f * eta_max)
    if cfg.lam > lam_cap * (1 + 1e-12):
        msgs.append(f"lambda={cfg.lam:.6g} exceeds 1/(2 L_f eta)={lam_cap:.6g}")
    for msg in msgs:
        warnings.warn(msg, FeasibilityWarning, stacklevel=3)
    return msgs


class NoiseStream:
    """Standard-normal draws as a pure function of ``(seed, node, iteration)``.

    Draws are generated per node in blocks of ``block`` iterations, each block
    from its own ``SeedSequence([seed, node, block_index])``.
    """

    def __init__(self, seed: int, m: int, dim: int, block: int = NOISE_BLOCK):
        self.seed = int(seed) % 2**64
        self.m, self.dim, self.block = m, dim, block
        self._cache: dict[int, np.ndarray] = {}

    def _block(self, k: int) -> np.ndarray:
        arr = self._cache.get(k)
        if arr is None:
            arr = np.empty((self.block, self.m, self.dim))
            for i in range(self.m):
                rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, i, k])))
                arr[:, i, :] = rng.standard_normal((self.block, self.dim))
            if len(self._cache) >= 2:
                self._cache.pop(min(self._cache))
            self._cache[k] = arr
        return arr

    def draw(self, t: int) -> np.ndarray:
        """Draws for all nodes at iteration ``t``, shape ``(m, dim)``."""
        k, r = divmod(int(t), self.block)
        return self._block(k)[r]


@dataclass
class SwarmState:
    """All node-local quantities at iteration ``t`` (one row per node)."""

    t: int
    x: np.ndarray
    y: np.ndarray
    u_x: np.ndarray
    u_y: np.ndarray
    w_x: np.ndarray
    w_y: np.ndarray
    grad_calls: np.ndarray
    x_tilde: np.ndarray | None = None
    y_tilde: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def x_bar(self) -> np.ndarray:
        return self.x.mean(axis=0)

    @property
    def y_bar(self) -> np.ndarray:
        return self.y.mean(axis=0)

    def copy(self) -> "SwarmState":
        return SwarmState(
            self.t,
            *(a.copy() for a in (self.x, self.y, self.u_x, self.u_y, self.w_x, self.w_y, self.grad_calls)),
            x_tilde=None if self.x_tilde is None else self.x_tilde.copy(),
            y_tilde=None if self.y_tilde is None else self.y_tilde.copy(),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("x", "y", "u_x", "u_y", "w_x", "w_y")}


def _weights(W, m: int) -> np.ndarray:
    if W is None:
        if m != 1:
            raise ValueError("a mixing matrix is required when m > 1")
        return np.ones((1, 1))
    weights = W.weights if isinstance(W, MixingMatrix) else np.asarray(W, dtype=float)
    if weights.shape != (m, m):
        raise ValueError(f"mixing matrix is {weights.shape[0]}x{weights.shape[1]}, problem has m={m}")
    return weights


def _node_init(v, m: int, dim: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape == (dim,):
        return np.tile(v, (m, 1))
    if v.shape == (m, dim):
        return v.copy()
    raise ValueError(f"{name} must have shape ({dim},) or ({m}, {dim}), got {v.shape}")


def _check_finite(t: int, state: SwarmState, *arrays):
    for a in arrays:
        bad = ~np.isfinite(a)
        if bad.any():
            node = int(np.flatnonzero(bad.any(axis=1))[0])
            raise DivergenceError(t, node, state)


def init_run(config: AlgoConfig, problem: ProblemInstance, W, x0, y0,
             noise: NoiseStream | None = None) -> SwarmState:
    """Place every node at ``(x0, y0)`` and seed momentum and trackers with one sample.

    ``x0``/``y0`` may also be given per node, with shapes ``(m, d)`` and ``(m, p)``.
    """
    m, d, p = problem.m, problem.d, problem.p
    weights = _weights(W, m)
    if noise is None:
        noise = NoiseStream(config.seed, m, d + p)
    X = _node_init(x0, m, d, "x0")
    Y = _node_init(y0, m, p, "y0")
    ux, uy = problem.sample_gradients(X, Y, noise.draw(0))
    state = SwarmState(
        t=0, x=X, y=Y, u_x=ux, u_y=uy,
        w_x=weights @ ux, w_y=weights @ uy,
        grad_calls=np.ones(m, dtype=np.int64),
    )
    _check_finite(0, state, ux, uy)
    return state


def _local_phase(idx, state, WX, WY, xi, out, gamma, lam, eta, alpha, beta, problem):
    x, y = state.x[idx], state.y[idx]
    xt = WX[idx] - gamma * state.w_x[idx]
    yt = WY[idx] + lam * state.w_y[idx]
    xn = x + eta * (xt - x)
    yn = y + eta * (yt - y)
    gxn, gyn = problem.sample_gradients(xn, yn, xi[idx], idx)
    gxo, gyo = problem.sample_gradients(x, y, xi[idx], idx)
    out["x_tilde"][idx] = xt
    out["y_tilde"][idx] = yt
    out["x"][idx] = xn
    out["y"][idx] = yn
    out["u_x"][idx] = gxn + (1.0 - alpha) * (state.u_x[idx] - gxo)
    out["u_y"][idx] = gyn + (1.0 - beta) * (state.u_y[idx] - gyo)


def step(state: SwarmState, config: AlgoConfig, problem: ProblemInstance, W,
         noise: NoiseStream | None = None, pool: ThreadPoolExecutor | None = None,
         blocks: list[np.ndarray] | None = None) -> SwarmState:
    """Advance one iteration. ``config`` must be resolved (``gamma``/``lam`` set)."""
    if config.gamma is None or config.lam is None:
        config = config.resolve(problem.constants)
    t = state.t
    if t >= config.T:
        raise ValueError(f"state already at horizon T={config.T}")
    m = state.m
    weights = _weights(W, m)
    if noise is None:
        noise = NoiseStream(config.seed, m, problem.d + problem.p)
    eta = schedule(config, t)[0]
    _, alpha, beta = schedule(config, t + 1)

    WX = weights @ state.x
    WY = weights @ state.y
    xi = noise.draw(t + 1)
    out = {
        k: np.empty_like(getattr(state, src))
        for k, src in (("x", "x"), ("y", "y"), ("x_tilde", "x"), ("y_tilde", "y"),
                       ("u_x", "u_x"), ("u_y", "u_y"))
    }
    args = (state, WX, WY, xi, out, config.gamma, config.lam, eta, alpha, beta, problem)
    if pool is None or blocks is None or len(blocks) == 1:
        _local_phase(np.arange(m), *args)
    else:
        for fut in [pool.submit(_local_phase, idx, *args) for idx in blocks]:
            fut.result()

    # (w - u) + u_new keeps a single node's tracker exactly equal to its estimate
    w_x = weights @ ((state.w_x - state.u_x) + out["u_x"])
    w_y = weights @ ((state.w_y - state.u_y) + out["u_y"])
    new = SwarmState(
        t=t + 1, x=out["x"], y=out["y"], u_x=out["u_x"], u_y=out["u_y"],
        w_x=w_x, w_y=w_y, grad_calls=state.grad_calls + GRADS_PER_STEP,
        x_tilde=out["x_tilde"], y_tilde=out["y_tilde"],
    )
    _check_finite(t + 1, state, new.x, new.y, new.u_x, new.u_y, new.w_x, new.w_y)
    return new


@dataclass
class RunSummary:
    final_state: SwarmState
    records: list
    config: AlgoConfig
    initial_stationarity: float
    first_step_stationarity: float
    mean_stationarity: float
    min_stationarity: float
    final_quarter_stationarity: float
    initial_residual: float
    final_residual: float
    grad_calls_total: int
    wall_time: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "T": self.config.T,
            "t_final": self.final_state.t,
            "initial_stationarity": self.initial_stationarity,
            "first_step_stationarity": self.first_step_stationarity,
            "mean_stationarity": self.mean_stationarity,
            "min_stationarity": self.min_stationarity,
            "final_quarter_stationarity": self.final_quarter_stationarity,
            "initial_residual": self.initial_residual,
            "final_residual": self.final_residual,
            "final_stationarity_node_max": self.records[-1].stationarity_node_max,
            "grad_calls_total": self.grad_calls_total,
            "grad_calls_per_node": self.final_state.grad_calls.tolist(),
            "wall_time_s": self.wall_time,
            "warnings": list(self.warnings),
        }


def summarize(records, final_state, config, wall_time=0.0, warn=()) -> RunSummary:
    from .metrics import trajectory_mean

    later = [r.stationarity for r in records if r.t >= 1]
    quarter = [r.stationarity for r in records if r.t > 0.75 * config.T]
    return RunSummary(
        final_state=final_state,
        records=list(records),
        config=config,
        initial_stationarity=records[0].stationarity,
        first_step_stationarity=next((r.stationarity for r in records if r.t == 1), records[0].stationarity),
        mean_stationarity=trajectory_mean(records),
        min_stationarity=float(min(later)) if later else records[0].stationarity,
        final_quarter_stationarity=float(np.mean(quarter)) if quarter else records[-1].stationarity,
        initial_residual=records[0].residual,
        final_residual=records[-1].residual,
        grad_calls_total=int(final_state.grad_calls.sum()),
        wall_time=wall_time,
        warnings=list(warn),
    )


def _node_blocks(m: int, threads: int) -> list[np.ndarray]:
    return [b for b in np.array_split(np.arange(m), max(1, min(threads, m))) if b.size]


def run(config: AlgoConfig, problem: ProblemInstance, W, x0, y0,
        metrics_sink: Callable | None = None, *, cadence: int = 1, threads: int = 1,
        observers: Iterable[Callable[[SwarmState], None]] = (),
        state_hook: Callable[[SwarmState], SwarmState | None] | None = None) -> RunSummary:
    """Run ``config.T`` iterations, recording metrics every ``cadence`` steps.

    The states at ``t = 0``, ``t = 1`` and ``t = T`` are always recorded. ``metrics_sink`` receives
    each ``MetricsRecord``; ``observers`` receive every state (``t = 0`` included).
    ``state_hook`` may replace a state after each step; it exists for fault
    injection in tests.
    """
    from .metrics import measure

    if cadence < 1:
        raise ValueError("cadence must be >= 1")
    config = config.resolve(problem.constants)
    msgs = check_feasibility(config, problem.constants)

    observers = list(observers)
    records = []

    def emit(state):
        rec = measure(state, problem, W)
        records.append(rec)
        if metrics_sink is not None:
            metrics_sink(rec)

    started = time.perf_counter()
    noise = NoiseStream(config.seed, problem.m, problem.d + problem.p)
    state = init_run(config, problem, W, x0, y0, noise)
    for obs in observers:
        obs(state)
    emit(state)

    blocks = _node_blocks(problem.m, threads)
    pool = ThreadPoolExecutor(max_workers=len(blocks)) if len(blocks) > 1 else None
    try:
        while state.t < config.T:
            state = step(state, config, problem, W, noise, pool, blocks)
            if state_hook is not None:
                state = state_hook(state) or state
            for obs in observers:
                obs(state)
            if state.t % cadence == 0 or state.t in (1, config.T):
                emit(state)
    except DivergenceError as err:
        err.records = records
        raise
    finally:
        if pool is not None:
            pool.shutdown()
    return summarize(records, state, config, time.perf_counter() - started, msgs)


def default_mixing(m: int) -> MixingMatrix:
    return build_mixing("ring", m)


def expected_grad_calls(m: int, T: int) -> int:
    return GRADS_PER_STEP * m * T + m


__all__ = [
    "AlgoConfig", "SwarmState", "RunSummary", "NoiseStream", "DivergenceError",
    "FeasibilityWarning", "schedule", "make_baseline_dsgda", "check_feasibility",
    "init_run", "step", "run", "expected_grad_calls",
]
