"""Sampled certificates that a problem instance meets its stated constants.

Each function returns a ``CheckResult``; none raise on failure. All sampling is
driven by an explicit seed, so results are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .problems import ProblemInstance, SIN2PL_MU, dphi, phi

ABS_TOL = 1e-12
REL_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    location: dict | None = None
    detail: str = ""
    children: list["CheckResult"] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "passed": self.passed,
            "worst": self.worst,
            "location": self.location,
            "detail": self.detail,
        }
        if self.children:
            out["children"] = [c.to_dict() for c in self.children]
        return out


def _points(problem: ProblemInstance, rng, n, scale=2.0):
    x = scale * rng.standard_normal((n, problem.d))
    y = scale * rng.standard_normal((n, problem.p))
    return x, y


def _tile_nodes(problem, x, y):
    """Evaluate every node at every point: rows are (point, node) pairs."""
    n, m = x.shape[0], problem.m
    X = np.repeat(x, m, axis=0)
    Y = np.repeat(y, m, axis=0)
    nodes = np.tile(np.arange(m), n)
    return X, Y, nodes


def _loc(flat_index, m):
    k, i = divmod(int(flat_index), m)
    return {"sample": k, "node": i}


def finite_difference(problem: ProblemInstance, n_points: int = 1000, seed: int = 0,
                      h: float = 1e-5, rtol: float = 1e-5) -> CheckResult:
    """Central differences of each ``f_i`` against its exact gradient.

    Error is ``||fd - g|| / max(1, ||g||)``.
    """
    rng = np.random.default_rng(seed)
    x, y = _points(problem, rng, n_points)
    X, Y, nodes = _tile_nodes(problem, x, y)
    gx, gy = problem.node_gradients(X, Y, nodes)
    g = np.hstack([gx, gy])
    fd = np.empty_like(g)
    d = problem.d
    for k in range(d + problem.p):
        Xp, Xm, Yp, Ym = X.copy(), X.copy(), Y.copy(), Y.copy()
        if k < d:
            Xp[:, k] += h
            Xm[:, k] -= h
        else:
            Yp[:, k - d] += h
            Ym[:, k - d] -= h
        fd[:, k] = (problem.node_values(Xp, Yp, nodes) - problem.node_values(Xm, Ym, nodes)) / (2 * h)
    err = np.linalg.norm(fd - g, axis=1) / np.maximum(1.0, np.linalg.norm(g, axis=1))
    j = int(np.argmax(err))
    return CheckResult("finite_difference", bool(err[j] <= rtol), float(err[j]), _loc(j, problem.m),
                       f"h={h}, rtol={rtol}, {n_points} points x {problem.m} nodes")


def smoothness(problem: ProblemInstance, n_pairs: int = 1000, seed: int = 0) -> CheckResult:
    """Lipschitz ratios of both partial gradients in both blocks against ``L_f``.

    ``worst`` is the largest ratio divided by ``L_f``; pass iff ``<= 1 + 1e-8``.
    """
    rng = np.random.default_rng(seed)
    m, L_f = problem.m, problem.constants.L_f
    x1, y1 = _points(problem, rng, n_pairs)
    step = 10.0 ** rng.uniform(-3, 0.5, size=(n_pairs, 1))
    dx = rng.standard_normal((n_pairs, problem.d))
    dy = rng.standard_normal((n_pairs, problem.p))
    x2 = x1 + step * dx / np.linalg.norm(dx, axis=1, keepdims=True)
    y2 = y1 + step * dy / np.linalg.norm(dy, axis=1, keepdims=True)

    X1, Y1, nodes = _tile_nodes(problem, x1, y1)
    X2, Y2, _ = _tile_nodes(problem, x2, y2)
    gx, gy = problem.node_gradients(X1, Y1, nodes)
    gx_x, gy_x = problem.node_gradients(X2, Y1, nodes)
    gx_y, gy_y = problem.node_gradients(X1, Y2, nodes)
    nx = np.linalg.norm(X2 - X1, axis=1)
    ny = np.linalg.norm(Y2 - Y1, axis=1)
    forms = {
        "grad_x over x": np.linalg.norm(gx_x - gx, axis=1) / nx,
        "grad_y over x": np.linalg.norm(gy_x - gy, axis=1) / nx,
        "grad_x over y": np.linalg.norm(gx_y - gx, axis=1) / ny,
        "grad_y over y": np.linalg.norm(gy_y - gy, axis=1) / ny,
    }
    worst_name, worst_j, worst = None, 0, -np.inf
    for name, ratios in forms.items():
        j = int(np.argmax(ratios))
        if ratios[j] / L_f > worst:
            worst_name, worst_j, worst = name, j, float(ratios[j] / L_f)
    loc = _loc(worst_j, m)
    loc["form"] = worst_name
    return CheckResult("smoothness", worst <= 1.0 + 1e-8, worst, loc,
                       f"max ratio / L_f over {n_pairs} pairs x {m} nodes, L_f={L_f:.6g}")


def unbiasedness(problem: ProblemInstance, n_samples: int = 100_000, seed: int = 0,
                 fail_prob: float = 1e-9) -> CheckResult:
    """Empirical mean of stochastic gradients against the exact gradient.

    The per-coordinate threshold is ``z * sigma / sqrt(N)`` with ``z`` set so the
    chance of any false alarm over all nodes and coordinates is below ``fail_prob``.
    """
    rng = np.random.default_rng(seed)
    m, d, p = problem.m, problem.d, problem.p
    x, y = _points(problem, rng, 1)
    k = m * (d + p)
    z = float(norm.isf(fail_prob / (2 * k)))
    threshold = z * problem.sigma / np.sqrt(n_samples)
    worst, where = 0.0, None
    for i in range(m):
        X = np.repeat(x, n_samples, axis=0)
        Y = np.repeat(y, n_samples, axis=0)
        nodes = np.full(n_samples, i)
        xi = rng.standard_normal((n_samples, d + p))
        sx, sy = problem.sample_gradients(X, Y, xi, nodes)
        ex, ey = problem.node_gradients(x, y, nodes[:1])
        dev = np.abs(np.concatenate([(sx - ex[0]).mean(axis=0), (sy - ey[0]).mean(axis=0)]))
        if dev.max() > worst or where is None:
            worst, where = float(dev.max()), {"node": i, "coordinate": int(dev.argmax())}
    return CheckResult("unbiasedness", worst <= threshold, worst, where,
                       f"threshold {threshold:.3g} (z={z:.2f}, N={n_samples})")


def _dual_samples(problem, rng, n):
    x = 2.0 * rng.standard_normal((n, problem.d))
    ys = np.array([problem.best_response(xi) for xi in x])
    scale = 10.0 ** rng.uniform(-3, 0.7, size=(n, 1))
    dy = rng.standard_normal((n, problem.p))
    y = ys + scale * dy / np.linalg.norm(dy, axis=1, keepdims=True)
    return x, y


def dual_conditions(problem: ProblemInstance, n_samples: int = 1000, seed: int = 0) -> list[CheckResult]:
    """PL, error-bound, quadratic-growth and residual-sign checks on the dual block."""
    rng = np.random.default_rng(seed)
    mu = problem.constants.mu
    x, y = _dual_samples(problem, rng, n_samples)
    gap = np.empty(n_samples)
    gnorm = np.empty(n_samples)
    dist = np.full(n_samples, np.nan)
    for k in range(n_samples):
        F_val = problem.oracle_F(x[k]).value
        gap[k] = F_val - problem.objective(x[k], y[k])
        gnorm[k] = np.linalg.norm(problem.objective_grad(x[k], y[k])[1])
        dk = problem.argmax_distance(x[k], y[k])
        if dk is not None:
            dist[k] = dk

    out = []
    slack = lambda rhs: ABS_TOL + REL_TOL * np.abs(rhs)

    viol = 2 * mu * gap - gnorm**2 - slack(2 * mu * gap)
    j = int(np.argmax(viol))
    ratio = np.min(gnorm**2 / np.maximum(2 * gap, 1e-300))
    out.append(CheckResult("pl", bool(viol[j] <= 0), float(max(viol[j], 0.0)), {"sample": j},
                           f"min ||grad_y f||^2 / (2 gap) = {ratio:.6g} vs mu = {mu:.6g}"))

    known = ~np.isnan(dist)
    if known.any():
        eb = np.where(known, mu * dist - gnorm - slack(mu * dist), -np.inf)
        j = int(np.argmax(eb))
        out.append(CheckResult("error_bound", bool(eb[j] <= 0), float(max(eb[j], 0.0)), {"sample": j},
                               "||grad_y f|| >= mu * dist(y, argmax)"))
        qg = np.where(known, 0.5 * mu * dist**2 - gap - slack(0.5 * mu * dist**2), -np.inf)
        j = int(np.argmax(qg))
        out.append(CheckResult("quadratic_growth", bool(qg[j] <= 0), float(max(qg[j], 0.0)), {"sample": j},
                               "F(x) - f(x, y) >= mu/2 * dist(y, argmax)^2"))

    j = int(np.argmin(gap))
    out.append(CheckResult("residual_nonnegative", bool(gap[j] >= -1e-10), float(max(-gap[j], 0.0)),
                           {"sample": j}, "F(x) - f(x, y) >= -1e-10"))
    return out


def phi_pl_ratio_min(lo: float = -10.0, hi: float = 10.0, step: float = 1e-4) -> float:
    """Minimum of ``phi'(z)^2 / (2 phi(z))`` on a grid, excluding the minimizer ``z = 0``."""
    n = int(round((hi - lo) / step)) + 1
    z = np.linspace(lo, hi, n)
    z = z[z != 0.0]
    return float(np.min(dphi(z) ** 2 / (2.0 * phi(z))))


def phi_pl_constant() -> CheckResult:
    r = phi_pl_ratio_min()
    return CheckResult("phi_pl_constant", r >= SIN2PL_MU, r, None,
                       f"grid [-10, 10] step 1e-4, required >= {SIN2PL_MU}")


def lipschitz_F(problem: ProblemInstance, n_samples: int = 1000, seed: int = 0,
                L: float | None = None) -> CheckResult:
    """Sampled Lipschitz ratio of ``grad F`` against ``L`` (default ``L_f (1 + kappa/2)``)."""
    rng = np.random.default_rng(seed)
    L = problem.constants.L if L is None else L
    x1 = 2.0 * rng.standard_normal((n_samples, problem.d))
    x2 = x1 + 10.0 ** rng.uniform(-3, 0.5, size=(n_samples, 1)) * rng.standard_normal((n_samples, problem.d))
    ratios = np.array([
        np.linalg.norm(problem.oracle_F(a).grad - problem.oracle_F(b).grad) / np.linalg.norm(a - b)
        for a, b in zip(x1, x2)
    ])
    j = int(np.argmax(ratios))
    worst = float(ratios[j] / L)
    return CheckResult("lemma1_constant", worst <= 1.0 + 1e-8, worst, {"sample": j},
                       f"max ||grad F(x1) - grad F(x2)|| / (L ||x1 - x2||), L={L:.6g}")


def all_certificates(problem: ProblemInstance, n_samples: int = 1000, seed: int = 0) -> list[CheckResult]:
    checks = [
        finite_difference(problem, n_samples, seed),
        smoothness(problem, n_samples, seed + 1),
        unbiasedness(problem, seed=seed + 2),
        *dual_conditions(problem, n_samples, seed + 3),
    ]
    if problem.family == "sin2pl":
        checks.append(phi_pl_constant())
    return checks
