"""Per-node stochastic minimax objectives with certified constants and exact oracles.

Two built-in families:

* ``sin2pl``: ``f_i(x, y) = 1/2 (x - c_i)^T D_i (x - c_i) - sum_j phi((y - P x)_j)``
  with ``phi(z) = z^2 + 3 sin^2 z``. The dual is nonconcave but PL with ``mu = 1/32``.
* ``plquadratic``: ``f_i(x, y) = 1/2 x^T A_i x + x^T B_i y - 1/2 y^T C_i y + a_i^T x + b_i^T y``
  whose averaged dual curvature may be singular (PL, not strongly concave).

Stochastic gradients come from ``f_i(x, y; xi) = f_i(x, y) + sigma * (xi_x^T x + xi_y^T y)``
with ``xi ~ N(0, I)``. Every sample path keeps the deterministic smoothness constant.
"""
from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

PINV_RTOL = 1e-10
RANGE_TOL = 1e-10
SIN2PL_MU = 1.0 / 32.0


class OracleError(RuntimeError):
    """The inner maximizer did not reach the gradient tolerance."""

    def __init__(self, message: str, best_y: np.ndarray, grad_norm: float):
        super().__init__(message)
        self.best_y = best_y
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class ProblemConstants:
    L_f: float
    mu: float
    sigma: float = 0.0
    F_star_lower_bound: float = -np.inf

    def __post_init__(self):
        if not (self.L_f > 0 and self.mu > 0):
            raise ValueError(f"L_f and mu must be positive, got L_f={self.L_f}, mu={self.mu}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")

    @property
    def kappa(self) -> float:
        return self.L_f / self.mu

    @property
    def L(self) -> float:
        """Smoothness constant of ``F(x) = max_y f(x, y)``."""
        return self.L_f * (1.0 + self.kappa / 2.0)


class OracleResult(NamedTuple):
    value: float
    grad: np.ndarray
    approximate: bool = False


def phi(z):
    return z * z + 3.0 * np.sin(z) ** 2


def dphi(z):
    return 2.0 * z + 3.0 * np.sin(2.0 * z)


def _matvec(M, v):
    # stacked matrix-vector product, evaluated slice by slice
    return np.matmul(M, v[..., None])[..., 0]


def _nodes(nodes, m):
    return np.arange(m) if nodes is None else np.asarray(nodes, dtype=int)


def _sym_check(M, name):
    M = np.asarray(M, dtype=float)
    if not np.allclose(M, np.swapaxes(M, -1, -2), rtol=0, atol=1e-12 * max(1.0, np.abs(M).max(initial=0))):
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _quadratic_min(H, g, c0, scale=1.0):
    """Infimum of ``1/2 x^T H x + g^T x + c0``; ``-inf`` when unbounded."""
    evals, evecs = np.linalg.eigh(H)
    tol = PINV_RTOL * max(scale, np.abs(evals).max(initial=0.0))
    if evals.min(initial=0.0) < -tol:
        return -np.inf
    keep = evals > tol
    gc = evecs.T @ g
    if np.any(np.abs(gc[~keep]) > RANGE_TOL * max(1.0, np.linalg.norm(g))):
        return -np.inf
    return float(c0 - 0.5 * np.sum(gc[keep] ** 2 / evals[keep]))


class ProblemInstance:
    """Base class: ``m`` nodes, primal dimension ``d``, dual dimension ``p``.

    Subclasses provide batched exact values and gradients; node-batched arrays have
    one row per node listed in ``nodes`` (all nodes when ``None``).
    """

    family = "custom"
    exact_oracles = False

    def __init__(self, m: int, d: int, p: int, constants: ProblemConstants, seed: int | None = None):
        if min(m, d, p) < 1:
            raise ValueError(f"m, d, p must be positive, got {(m, d, p)}")
        self.m, self.d, self.p = int(m), int(d), int(p)
        self.constants = constants
        self.seed = seed

    @property
    def sigma(self) -> float:
        return self.constants.sigma

    def with_constants(self, **changes) -> "ProblemInstance":
        """Copy of this problem with some certified constants overridden."""
        out = copy.copy(self)
        out.constants = replace(self.constants, **changes)
        return out

    # -- per-node oracles -------------------------------------------------
    def node_values(self, X, Y, nodes=None) -> np.ndarray:
        raise NotImplementedError

    def node_gradients(self, X, Y, nodes=None) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def sample_gradients(self, X, Y, xi, nodes=None):
        """Stochastic gradients with standard-normal draws ``xi`` of shape (k, d + p)."""
        gx, gy = self.node_gradients(X, Y, nodes)
        if self.sigma:
            gx = gx + self.sigma * xi[:, : self.d]
            gy = gy + self.sigma * xi[:, self.d :]
        return gx, gy

    # -- averaged objective -----------------------------------------------
    def objective(self, x, y) -> float:
        X = np.broadcast_to(x, (self.m, self.d))
        Y = np.broadcast_to(y, (self.m, self.p))
        return float(np.mean(self.node_values(X, Y)))

    def objective_grad(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        X = np.broadcast_to(x, (self.m, self.d))
        Y = np.broadcast_to(y, (self.m, self.p))
        gx, gy = self.node_gradients(X, Y)
        return gx.mean(axis=0), gy.mean(axis=0)

    def oracle_F(self, x) -> OracleResult:
        y, _ = maximize_dual(self, x)
        value = self.objective(x, y)
        gx, _ = self.objective_grad(x, y)
        return OracleResult(value, gx, approximate=True)

    def best_response(self, x) -> np.ndarray:
        return maximize_dual(self, x)[0]

    def argmax_distance(self, x, y) -> float | None:
        """Distance from ``y`` to the maximizer set of ``f(x, .)`` when it is known."""
        return None

    def to_dict(self) -> dict:
        raise TypeError(f"{type(self).__name__} is not serializable")


class Sin2PL(ProblemInstance):
    family = "sin2pl"
    exact_oracles = True

    def __init__(self, D, c, P, sigma: float = 0.0, seed: int | None = None):
        D = _sym_check(np.atleast_3d(np.asarray(D, dtype=float)), "D_i")
        c = np.asarray(c, dtype=float)
        P = np.atleast_2d(np.asarray(P, dtype=float))
        m, d, _ = D.shape
        if c.shape != (m, d) or P.shape[1] != d:
            raise ValueError(f"shape mismatch: D {D.shape}, c {c.shape}, P {P.shape}")
        self.D, self.c, self.P = D, c, P
        self._PT = P.T.copy()
        p = P.shape[0]

        self.D_bar = D.mean(axis=0)
        self.Dc_bar = _matvec(D, c).mean(axis=0)
        self.cDc_bar = float(np.mean(np.einsum("ni,ni->n", c, _matvec(D, c))))

        p_norm2 = np.linalg.norm(P, 2) ** 2
        d_norm = max(np.linalg.norm(Di, 2) for Di in D)
        L_f = max(8.0 * (1.0 + p_norm2), d_norm + 8.0 * p_norm2)
        F_low = _quadratic_min(self.D_bar, -self.Dc_bar, 0.5 * self.cDc_bar)
        if not np.isfinite(F_low):
            warnings.warn("averaged primal objective is unbounded below", stacklevel=2)
        super().__init__(m, d, p, ProblemConstants(L_f, SIN2PL_MU, float(sigma), F_low), seed)

    def _z(self, X, Y):
        return Y - X @ self._PT

    def node_values(self, X, Y, nodes=None):
        idx = _nodes(nodes, self.m)
        diff = np.asarray(X) - self.c[idx]
        g = 0.5 * np.einsum("ni,ni->n", diff, _matvec(self.D[idx], diff))
        return g - phi(self._z(X, Y)).sum(axis=1)

    def node_gradients(self, X, Y, nodes=None):
        idx = _nodes(nodes, self.m)
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        k = X.shape[0]
        PB = np.broadcast_to(self.P, (k,) + self.P.shape)
        PTB = np.broadcast_to(self._PT, (k,) + self._PT.shape)
        z = Y - _matvec(PB, X)
        dz = dphi(z)
        gx = _matvec(self.D[idx], X - self.c[idx]) + _matvec(PTB, dz)
        return gx, -dz

    def oracle_F(self, x):
        x = np.asarray(x, dtype=float)
        diff = x[None, :] - self.c
        value = 0.5 * np.mean(np.einsum("ni,ni->n", diff, _matvec(self.D, diff)))
        return OracleResult(float(value), self.D_bar @ x - self.Dc_bar)

    def best_response(self, x):
        return self.P @ np.asarray(x, dtype=float)

    def argmax_distance(self, x, y):
        return float(np.linalg.norm(np.asarray(y) - self.best_response(x)))

    def to_dict(self):
        return {
            "family": self.family,
            "sigma": self.sigma,
            "seed": self.seed,
            "params": {"D": self.D.tolist(), "c": self.c.tolist(), "P": self.P.tolist()},
        }


class PLQuadratic(ProblemInstance):
    family = "plquadratic"
    exact_oracles = True

    def __init__(self, A, B, C, a, b, sigma: float = 0.0, seed: int | None = None):
        A = _sym_check(np.asarray(A, dtype=float), "A_i")
        C = _sym_check(np.asarray(C, dtype=float), "C_i")
        B = np.asarray(B, dtype=float)
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        m, d, _ = A.shape
        p = C.shape[1]
        if B.shape != (m, d, p) or C.shape != (m, p, p) or a.shape != (m, d) or b.shape != (m, p):
            raise ValueError(
                f"shape mismatch: A {A.shape}, B {B.shape}, C {C.shape}, a {a.shape}, b {b.shape}"
            )
        self.A, self.B, self.C, self.a, self.b = A, B, C, a, b
        self._BT = np.swapaxes(B, 1, 2).copy()

        self.A_bar, self.B_bar, self.C_bar = A.mean(0), B.mean(0), C.mean(0)
        self.a_bar, self.b_bar = a.mean(0), b.mean(0)

        evals, evecs = np.linalg.eigh(self.C_bar)
        tol = PINV_RTOL * max(np.abs(evals).max(initial=0.0), 1e-300)
        if evals.min() < -tol:
            raise ValueError("averaged dual curvature C must be positive semidefinite")
        keep = evals > tol
        if not keep.any():
            raise ValueError("averaged dual curvature C is zero; no PL constant")
        self._range = evecs[:, keep]
        self.C_pinv = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
        mu = float(evals[keep].min())

        proj = self._range @ self._range.T
        for i in range(m):
            for name, vecs in (("B_i columns", B[i]), ("b_i", b[i][None, :])):
                # each row of ``vecs`` must lie in range(C)
                resid = vecs - vecs @ proj
                scale = max(1.0, np.abs(vecs).max(initial=0.0))
                if np.abs(resid).max(initial=0.0) > RANGE_TOL * scale:
                    raise ValueError(f"{name} of node {i} outside range(C); F would be +inf")

        L_f = max(
            max(np.linalg.norm(M, 2) for M in A),
            max(np.linalg.norm(M, 2) for M in B),
            max(np.linalg.norm(M, 2) for M in C),
        )
        L_f = max(L_f, mu)
        self.H_F = self.A_bar + self.B_bar @ self.C_pinv @ self.B_bar.T
        g_F = self.a_bar + self.B_bar @ self.C_pinv @ self.b_bar
        F_low = _quadratic_min(self.H_F, g_F, 0.5 * self.b_bar @ self.C_pinv @ self.b_bar)
        if not np.isfinite(F_low):
            warnings.warn("primal objective F is unbounded below", stacklevel=2)
        super().__init__(m, d, p, ProblemConstants(float(L_f), mu, float(sigma), F_low), seed)

    def node_values(self, X, Y, nodes=None):
        idx = _nodes(nodes, self.m)
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        quad = 0.5 * np.einsum("ni,ni->n", X, _matvec(self.A[idx], X))
        cross = np.einsum("ni,ni->n", X, _matvec(self.B[idx], Y))
        dual = 0.5 * np.einsum("ni,ni->n", Y, _matvec(self.C[idx], Y))
        lin = np.einsum("ni,ni->n", self.a[idx], X) + np.einsum("ni,ni->n", self.b[idx], Y)
        return quad + cross - dual + lin

    def node_gradients(self, X, Y, nodes=None):
        idx = _nodes(nodes, self.m)
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        gx = _matvec(self.A[idx], X) + _matvec(self.B[idx], Y) + self.a[idx]
        gy = _matvec(self._BT[idx], X) - _matvec(self.C[idx], Y) + self.b[idx]
        return gx, gy

    def _s(self, x):
        return self.B_bar.T @ x + self.b_bar

    def best_response(self, x):
        return self.C_pinv @ self._s(np.asarray(x, dtype=float))

    def oracle_F(self, x):
        x = np.asarray(x, dtype=float)
        s = self._s(x)
        value = 0.5 * x @ self.A_bar @ x + self.a_bar @ x + 0.5 * s @ self.C_pinv @ s
        grad = self.A_bar @ x + self.a_bar + self.B_bar @ (self.C_pinv @ s)
        return OracleResult(float(value), grad)

    def argmax_distance(self, x, y):
        diff = np.asarray(y, dtype=float) - self.best_response(x)
        return float(np.linalg.norm(self._range.T @ diff))

    def to_dict(self):
        return {
            "family": self.family,
            "sigma": self.sigma,
            "seed": self.seed,
            "params": {k: getattr(self, k).tolist() for k in ("A", "B", "C", "a", "b")},
        }


class CustomProblem(ProblemInstance):
    """User-supplied per-node callables; ``F`` comes from the fallback maximizer.

    ``value(i, x, y)`` returns ``f_i(x, y)``; ``grad(i, x, y)`` returns ``(g_x, g_y)``.
    """

    def __init__(self, m, d, p, value: Callable, grad: Callable, constants: ProblemConstants):
        super().__init__(m, d, p, constants)
        self._value = value
        self._grad = grad

    def node_values(self, X, Y, nodes=None):
        idx = _nodes(nodes, self.m)
        return np.array([self._value(int(i), X[k], Y[k]) for k, i in enumerate(idx)], dtype=float)

    def node_gradients(self, X, Y, nodes=None):
        idx = _nodes(nodes, self.m)
        pairs = [self._grad(int(i), X[k], Y[k]) for k, i in enumerate(idx)]
        gx = np.array([np.asarray(g[0], dtype=float) for g in pairs]).reshape(len(idx), self.d)
        gy = np.array([np.asarray(g[1], dtype=float) for g in pairs]).reshape(len(idx), self.p)
        return gx, gy


def maximize_dual(problem: ProblemInstance, x, *, starts: int = 16, tol: float = 1e-10,
                  max_iter: int = 200_000, seed: int = 0):
    """Multi-start gradient ascent on ``y -> f(x, y)`` with step ``1/L_f``.

    Returns ``(y, value)`` for the best converged start; raises ``OracleError``
    carrying the best iterate when no start reaches ``||grad_y f|| <= tol``.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    step = 1.0 / problem.constants.L_f
    best = None
    fallback = (None, np.inf)
    for s in range(starts):
        y = np.zeros(problem.p) if s == 0 else rng.standard_normal(problem.p)
        for _ in range(max_iter):
            _, gy = problem.objective_grad(x, y)
            gnorm = float(np.linalg.norm(gy))
            if gnorm <= tol:
                break
            y = y + step * gy
        if gnorm <= tol:
            val = problem.objective(x, y)
            if best is None or val > best[1]:
                best = (y, val)
        elif gnorm < fallback[1]:
            fallback = (y, gnorm)
    if best is None:
        raise OracleError(
            f"inner maximizer did not reach ||grad_y f|| <= {tol} (best {fallback[1]:.3g})",
            best_y=fallback[0],
            grad_norm=fallback[1],
        )
    return best


# -- functional surface -------------------------------------------------------

def grad(problem: ProblemInstance, i: int, x, y, sample=None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of node ``i``: exact when ``sample`` is None, else the draw ``sample``.

    ``sample`` is a standard-normal vector of length ``d + p`` (see ``draw_sample``).
    """
    if not 0 <= i < problem.m:
        raise IndexError(f"node index {i} out of range for m={problem.m}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (problem.d,) or y.shape != (problem.p,):
        raise ValueError(f"expected x of shape ({problem.d},), y of shape ({problem.p},)")
    nodes = np.array([i])
    if sample is None:
        gx, gy = problem.node_gradients(x[None], y[None], nodes)
    else:
        xi = np.asarray(sample, dtype=float).reshape(1, problem.d + problem.p)
        gx, gy = problem.sample_gradients(x[None], y[None], xi, nodes)
    return gx[0], gy[0]


def draw_sample(problem: ProblemInstance, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(problem.d + problem.p)


def oracle_F(problem: ProblemInstance, x) -> OracleResult:
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.d,):
        raise ValueError(f"expected x of shape ({problem.d},), got {x.shape}")
    return problem.oracle_F(x)


def best_response(problem: ProblemInstance, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.d,):
        raise ValueError(f"expected x of shape ({problem.d},), got {x.shape}")
    return problem.best_response(x)


# -- generators ---------------------------------------------------------------

def _random_sym(rng, k, n):
    S = rng.standard_normal((k, n, n))
    return 0.5 * (S + np.swapaxes(S, 1, 2))


def _spectrum_matrix(rng, n, lo, hi):
    Q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    return (Q * np.linspace(lo, hi, n)) @ Q.T


def make_sin2pl(m: int, d: int, p: int | None = None, *, D=None, c=None, P=None,
                sigma: float = 1.0, seed: int = 0, hess_range=(0.5, 2.0),
                heterogeneity: float = 1.5, coupling_norm: float = 1.0) -> Sin2PL:
    """Build a sin^2-coupled PL instance; missing blocks are drawn from ``seed``.

    Random ``D_i = H + heterogeneity * S_i`` where ``H`` has eigenvalues in
    ``hess_range`` and the symmetric ``S_i`` sum to zero, so single nodes may be
    nonconvex while ``F`` stays a convex quadratic.
    """
    rng = np.random.default_rng(seed)
    p = d if p is None else p
    if D is None:
        H = _spectrum_matrix(rng, d, *hess_range)
        S = _random_sym(rng, m, d)
        S -= S.mean(axis=0)
        D = H + heterogeneity * S
    if c is None:
        c = rng.standard_normal((m, d))
    if P is None:
        P = rng.standard_normal((p, d))
        P *= coupling_norm / np.linalg.norm(P, 2)
    return Sin2PL(D, c, P, sigma=sigma, seed=seed)


def make_plquadratic(m: int, d: int, p: int, *, mu: float = 0.5, cond_y: float = 4.0,
                     null_dim: int | None = None, hess_range=(0.5, 2.0),
                     heterogeneity: float = 0.5, sigma: float = 1.0, seed: int = 0,
                     A=None, B=None, C=None, a=None, b=None) -> PLQuadratic:
    """Build a quadratic game whose averaged dual curvature is singular.

    ``C`` has rank ``p - null_dim`` (``null_dim`` defaults to 1 when ``p >= 2``)
    with nonzero eigenvalues in ``[mu, mu * cond_y]``. ``B_i`` and ``b_i`` are
    drawn inside ``range(C)``; ``A_i`` are shifted so the Hessian of ``F`` has
    eigenvalues in ``hess_range``. Explicit blocks override the random draws.
    """
    rng = np.random.default_rng(seed)
    if null_dim is None:
        null_dim = 1 if p >= 2 else 0
    r = p - null_dim
    if r < 1:
        raise ValueError("dual curvature needs rank >= 1")
    Q = np.linalg.qr(rng.standard_normal((p, p)))[0]
    Qr = Q[:, :r]
    if C is None:
        Cbar = (Qr * np.linspace(mu, mu * cond_y, r)) @ Qr.T
        M = _random_sym(rng, m, r)
        M -= M.mean(axis=0)
        C = Cbar + heterogeneity * mu * np.einsum("ij,njk,lk->nil", Qr, M, Qr)
    if B is None:
        B = rng.standard_normal((m, d, r)) @ Qr.T / np.sqrt(max(d, r))
    if b is None:
        b = rng.standard_normal((m, r)) @ Qr.T
    if a is None:
        a = rng.standard_normal((m, d))
    if A is None:
        Cbar = np.mean(C, axis=0)
        Bbar = np.mean(B, axis=0)
        coupling = Bbar @ np.linalg.pinv(Cbar, rcond=PINV_RTOL, hermitian=True) @ Bbar.T
        H = _spectrum_matrix(rng, d, *hess_range)
        S = _random_sym(rng, m, d)
        S -= S.mean(axis=0)
        A = H - 0.5 * (coupling + coupling.T) + heterogeneity * S
    return PLQuadratic(A, B, C, a, b, sigma=sigma, seed=seed)


FAMILY_BUILDERS = {"sin2pl": make_sin2pl, "plquadratic": make_plquadratic}


def problem_from_dict(doc: dict) -> ProblemInstance:
    """Inverse of ``ProblemInstance.to_dict``."""
    family = doc.get("family")
    params = doc["params"]
    if family == "sin2pl":
        return Sin2PL(params["D"], params["c"], params["P"], sigma=doc["sigma"], seed=doc.get("seed"))
    if family == "plquadratic":
        return PLQuadratic(
            params["A"], params["B"], params["C"], params["a"], params["b"],
            sigma=doc["sigma"], seed=doc.get("seed"),
        )
    raise ValueError(f"unknown problem family {family!r}")


def dumps(problem: ProblemInstance) -> str:
    return json.dumps(problem.to_dict())


def loads(text: str) -> ProblemInstance:
    return problem_from_dict(json.loads(text))
