"""Command-line experiment runner.

    dmgda run    config.json [--out DIR] [--threads N] [--cadence K]
    dmgda sweep  config.json [...]
    dmgda verify config.json [...]

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 divergence.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .algorithm import AlgoConfig, DivergenceError, FeasibilityWarning, run as run_algorithm
from .metrics import default_cadence, rate_fit, trajectory_mean, write_csv
from .problems import FAMILY_BUILDERS, ProblemInstance
from .topology import MixingMatrix, build_mixing, from_edge_file, spectral_gap
from .verify import TrajectoryRecorder, verify_run

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

PROBLEM_DEFAULTS = {"d": 4, "p": None, "sigma": 1.0, "seed": 0, "options": {}}
TOPOLOGY_DEFAULTS = {"weighting": "metropolis"}
RUN_DEFAULTS = {"T_list": None, "repeats": 1, "seeds": None, "cadence": None,
                "out": "dmgda_out", "x0": None, "y0": None, "verify_samples": 1000}
PERTURB_DEFAULTS = {"node": 0, "magnitude": 1.0}
EXPLICIT_BLOCKS = {"sin2pl": ("D", "c", "P"), "plquadratic": ("A", "B", "C", "a", "b")}


class ConfigError(ValueError):
    """Invalid experiment config; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def load_schema() -> dict:
    return json.loads(resources.files("dmgda").joinpath("config.schema.json").read_text())


@dataclass
class ExperimentConfig:
    """A fully defaulted experiment description; ``to_dict`` round-trips through ``from_dict``."""

    problem: dict
    topology: dict
    algorithm: dict
    run: dict = field(default_factory=dict)
    debug: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        validator = jsonschema.Draft202012Validator(load_schema())
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            path = ".".join(str(p) for p in err.absolute_path) or "<root>"
            raise ConfigError(path, err.message)
        doc = copy.deepcopy(doc)
        problem = {**PROBLEM_DEFAULTS, **doc["problem"]}
        topology = {**TOPOLOGY_DEFAULTS, **doc["topology"]}
        m_top, m_prob = topology.get("m"), problem.get("m")
        if m_top is None and m_prob is None:
            raise ConfigError("topology.m", "number of nodes is required")
        if m_top is not None and m_prob is not None and m_top != m_prob:
            raise ConfigError("problem.m", f"problem has m={m_prob} but topology has m={m_top}")
        problem["m"] = m_prob if m_prob is not None else m_top
        topology["m"] = m_top if m_top is not None else m_prob
        if problem["p"] is None:
            problem["p"] = problem["d"]
        if topology["family"] == "custom" and "edges" not in topology and "edge_file" not in topology:
            raise ConfigError("topology.edges", "custom topology needs edges or edge_file")

        algo = {f: v for f, v in AlgoConfig().to_dict().items()}
        algo.update(doc["algorithm"])
        run = {**RUN_DEFAULTS, **doc.get("run", {})}
        debug = copy.deepcopy(doc.get("debug", {}))
        if "perturb_tracking" in debug:
            debug["perturb_tracking"] = {**PERTURB_DEFAULTS, **debug["perturb_tracking"]}
        cfg = cls(problem, topology, algo, run, debug)
        cfg._check_semantics()
        return cfg

    def _check_semantics(self) -> None:
        d, p = self.problem["d"], self.problem["p"]
        for key, dim in (("x0", d), ("y0", p)):
            v = self.run[key]
            if v is not None and len(v) != dim:
                raise ConfigError(f"run.{key}", f"expected length {dim}, got {len(v)}")
        seeds = self.run["seeds"]
        if seeds is not None and len(seeds) != self.run["repeats"]:
            raise ConfigError("run.seeds", f"expected {self.run['repeats']} seeds, got {len(seeds)}")
        params = self.problem.get("params")
        if params is not None:
            allowed = EXPLICIT_BLOCKS[self.problem["family"]]
            unknown = sorted(set(params) - set(allowed))
            if unknown:
                raise ConfigError(f"problem.params.{unknown[0]}", f"unknown block (allowed: {', '.join(allowed)})")
        perturb = self.debug.get("perturb_tracking")
        if perturb is not None and perturb["node"] >= self.problem["m"]:
            raise ConfigError("debug.perturb_tracking.node", "node index out of range")
        try:
            self.algo_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError("algorithm", str(exc)) from None

    def to_dict(self) -> dict:
        out = {"problem": self.problem, "topology": self.topology, "algorithm": self.algorithm, "run": self.run}
        if self.debug:
            out["debug"] = self.debug
        return copy.deepcopy(out)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("<file>", str(exc)) from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        return cls.from_dict(doc)

    def algo_config(self, **overrides) -> AlgoConfig:
        return AlgoConfig.from_dict({**self.algorithm, **overrides})

    def build_problem(self) -> ProblemInstance:
        pr = self.problem
        builder = FAMILY_BUILDERS[pr["family"]]
        kwargs = dict(pr.get("options") or {})
        for name, value in (pr.get("params") or {}).items():
            kwargs[name] = np.asarray(value, dtype=float)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return builder(pr["m"], pr["d"], pr["p"], sigma=pr["sigma"], seed=pr["seed"], **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError("problem", str(exc)) from None

    def build_mixing(self) -> MixingMatrix:
        tp = self.topology
        try:
            if tp.get("edge_file"):
                return from_edge_file(tp["edge_file"], tp.get("m"), tp["weighting"])
            edges = [tuple(e) for e in tp["edges"]] if tp.get("edges") else None
            shape = tuple(tp["shape"]) if tp.get("shape") else None
            return build_mixing(tp["family"], tp["m"], tp["weighting"], shape=shape, edges=edges)
        except (OSError, ValueError) as exc:
            raise ConfigError("topology", str(exc)) from None

    def initial_point(self, problem: ProblemInstance) -> tuple[np.ndarray, np.ndarray]:
        x0 = self.run["x0"]
        y0 = self.run["y0"]
        x0 = np.ones(problem.d) if x0 is None else np.asarray(x0, dtype=float)
        y0 = np.zeros(problem.p) if y0 is None else np.asarray(y0, dtype=float)
        return x0, y0


def resolve_threads(cli_value: int | None) -> int:
    if cli_value is not None:
        return max(1, cli_value)
    env = os.environ.get("DMGDA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("DMGDA_THREADS", f"not an integer: {env!r}") from None
    return 1


def _perturb_hook(debug: dict):
    fault = debug.get("perturb_tracking")
    if fault is None:
        return None

    def hook(state):
        if state.t == fault["t"]:
            state.w_x[fault["node"]] += fault["magnitude"]
        return state

    return hook


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


@dataclass
class RunOutcome:
    status: str
    summary: dict
    records: list
    trajectory: list | None = None
    warnings: list = field(default_factory=list)


def execute(cfg: ExperimentConfig, out_dir: Path, *, seed: int | None = None, T: int | None = None,
            threads: int = 1, cadence: int | None = None, record_states: bool = False,
            problem: ProblemInstance | None = None, W: MixingMatrix | None = None) -> RunOutcome:
    """One run: writes ``metrics.csv`` and ``summary.json`` into ``out_dir``."""
    problem = cfg.build_problem() if problem is None else problem
    W = cfg.build_mixing() if W is None else W
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if T is not None:
        overrides["T"] = T
    algo = cfg.algo_config(**overrides).resolve(problem.constants)
    cadence = cadence or cfg.run["cadence"] or default_cadence(algo.T)
    x0, y0 = cfg.initial_point(problem)
    recorder = TrajectoryRecorder() if record_states else None

    used = cfg.to_dict()
    used["algorithm"] = algo.to_dict()
    used["run"]["cadence"] = cadence
    base = {
        "version": __version__,
        "config": used,
        "nu": spectral_gap(W),
        "expected_grad_calls": 4 * problem.m * algo.T + problem.m,
        "constants": {"L_f": problem.constants.L_f, "mu": problem.constants.mu, "L": problem.constants.L},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FeasibilityWarning)
        try:
            result = run_algorithm(
                algo, problem, W, x0, y0, cadence=cadence, threads=threads,
                observers=[recorder] if recorder else (), state_hook=_perturb_hook(cfg.debug),
            )
        except DivergenceError as err:
            msgs = [str(w.message) for w in caught if issubclass(w.category, FeasibilityWarning)]
            write_csv(err.records, out_dir / "metrics.csv")
            summary = {**base, "status": "diverged", "diverged_at": {"t": err.t, "node": err.node},
                       "records_written": len(err.records), "warnings": msgs}
            _write_json(out_dir / "summary.json", summary)
            return RunOutcome("diverged", summary, err.records, warnings=msgs)
    write_csv(result.records, out_dir / "metrics.csv")
    summary = {**base, "status": "ok", **result.to_dict()}
    _write_json(out_dir / "summary.json", summary)
    return RunOutcome("ok", summary, result.records,
                      recorder.states if recorder else None, list(result.warnings))


def cmd_run(cfg: ExperimentConfig, out: Path, threads: int, cadence: int | None) -> int:
    outcome = execute(cfg, out, threads=threads, cadence=cadence)
    if outcome.status == "diverged":
        d = outcome.summary["diverged_at"]
        print(f"diverged at t={d['t']} (node {d['node']}); partial artifacts in {out}", file=sys.stderr)
        return EXIT_DIVERGED
    s = outcome.summary
    print(f"T={s['T']} mean stationarity {s['mean_stationarity']:.6g} "
          f"(initial {s['initial_stationarity']:.6g}); artifacts in {out}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path, threads: int, cadence: int | None) -> int:
    T_list = cfg.run["T_list"]
    if T_list is None or len(set(T_list)) < 3:
        raise ConfigError("run.T_list", "a sweep needs at least 3 distinct T values")
    T_list = sorted(set(T_list))
    R = cfg.run["repeats"]
    seeds = cfg.run["seeds"] or [cfg.algorithm["seed"] + r for r in range(R)]
    problem, W = cfg.build_problem(), cfg.build_mixing()
    rows, means = [], []
    for T in T_list:
        vals = []
        for r, seed in enumerate(seeds):
            outcome = execute(cfg, out / f"T{T}" / f"r{r}", seed=seed, T=T, threads=threads,
                              cadence=cadence, problem=problem, W=W)
            if outcome.status == "diverged":
                print(f"diverged in sweep at T={T}, repeat {r}; partial artifacts in {out}", file=sys.stderr)
                return EXIT_DIVERGED
            vals.append(trajectory_mean(outcome.records))
        mean = float(np.mean(vals))
        stderr = float(np.std(vals, ddof=1) / np.sqrt(R)) if R > 1 else 0.0
        rows.append((T, vals, mean, stderr))
        means.append(mean)
    header = ["T", *(f"repeat_{r}" for r in range(R)), "mean", "stderr"]
    with open(out / "sweep.csv", "w", newline="\n", encoding="ascii") as fh:
        fh.write(",".join(header) + "\n")
        for T, vals, mean, stderr in rows:
            fh.write(",".join([str(T), *(format(v, ".17g") for v in vals),
                               format(mean, ".17g"), format(stderr, ".17g")]) + "\n")
    fit = rate_fit(zip(T_list, means))
    _write_json(out / "rate.json", {
        "slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2,
        "T_list": T_list, "mean_stationarity": means, "seeds": seeds, "version": __version__,
    })
    print(f"slope {fit.slope:.4f}, r2 {fit.r2:.4f}; artifacts in {out}")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out: Path, threads: int, cadence: int | None) -> int:
    problem, W = cfg.build_problem(), cfg.build_mixing()
    outcome = execute(cfg, out, threads=threads, cadence=cadence, record_states=True, problem=problem, W=W)
    if outcome.status == "diverged":
        print("diverged during verification run", file=sys.stderr)
        return EXIT_DIVERGED
    algo = cfg.algo_config().resolve(problem.constants)
    report = verify_run(outcome.trajectory, problem, W, algo, n_samples=cfg.run["verify_samples"],
                        seed=cfg.problem["seed"], warnings=outcome.warnings)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK if report.passed else EXIT_VERIFY


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmgda", description="Decentralized momentum GDA experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "single run: metrics.csv + summary.json"),
                           ("sweep", "runs over run.T_list: sweep.csv + rate.json"),
                           ("verify", "instrumented run plus certificates: report.json + report.txt")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides run.out)")
        p.add_argument("--threads", type=int, help="worker threads for the per-node phase (env DMGDA_THREADS)")
        p.add_argument("--cadence", type=int, help="record metrics every k iterations")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cadence is not None and args.cadence < 1:
            raise ConfigError("--cadence", "must be >= 1")
        cfg = ExperimentConfig.load(args.config)
        threads = resolve_threads(args.threads)
        out = Path(args.out or cfg.run["out"])
        return COMMANDS[args.command](cfg, out, threads, args.cadence)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
