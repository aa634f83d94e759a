"""Gossip topologies: doubly-stochastic mixing matrices and their spectral quantity."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

STOCHASTIC_TOL = 1e-12

FAMILIES = ("complete", "ring", "path", "grid2d", "custom")
WEIGHTINGS = ("metropolis", "lazy-uniform")


class MixingValidationError(ValueError):
    """Raised when a matrix does not satisfy the mixing-matrix invariants."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        failed = ", ".join(c.name for c in report.checks.values() if not c.passed)
        super().__init__(f"invalid mixing matrix: failed {failed}")


class DisconnectedGraphError(ValueError):
    def __init__(self, components: list[list[int]]):
        self.components = components
        desc = "; ".join("{" + ", ".join(map(str, c)) + "}" for c in components)
        super().__init__(f"graph is disconnected, components: {desc}")


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric doubly-stochastic weights for one gossip round.

    ``weights`` is read-only; ``nu`` is ``max(|lambda_2|, |lambda_m|)``.
    """

    weights: np.ndarray
    nu: float
    edges: tuple[tuple[int, int], ...]
    family: str = "custom"
    weighting: str = "metropolis"

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    def neighbors(self, i: int) -> list[int]:
        """Nodes j with W[i, j] > 0, self included."""
        return [int(j) for j in np.flatnonzero(self.weights[i] > 0)]


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    worst: float


@dataclass
class ValidationReport:
    checks: dict[str, CheckOutcome] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def add(self, name: str, worst: float, passed: bool) -> None:
        self.checks[name] = CheckOutcome(name, bool(passed), float(worst))

    def raise_if_failed(self) -> None:
        if not self.passed:
            raise MixingValidationError(self)


def _graph_edges(family: str, m: int, shape=None, edges=None) -> set[tuple[int, int]]:
    out: set[tuple[int, int]] = set()

    def add(i, j):
        if i != j:
            out.add((min(i, j), max(i, j)))

    if family == "complete":
        for i in range(m):
            for j in range(i + 1, m):
                add(i, j)
    elif family == "ring":
        for i in range(m):
            add(i, (i + 1) % m)
    elif family == "path":
        for i in range(m - 1):
            add(i, i + 1)
    elif family == "grid2d":
        rows, cols = _grid_shape(m, shape)
        for r in range(rows):
            for c in range(cols):
                k = r * cols + c
                if c + 1 < cols:
                    add(k, k + 1)
                if r + 1 < rows:
                    add(k, k + cols)
    elif family == "custom":
        if edges is None:
            raise ValueError("custom topology needs an edge list")
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < m and 0 <= j < m):
                raise ValueError(f"edge ({i}, {j}) out of range for m={m}")
            add(i, j)
    else:
        raise ValueError(f"unknown topology family {family!r}; expected one of {FAMILIES}")
    return out


def _grid_shape(m: int, shape) -> tuple[int, int]:
    if shape is None:
        rows = max(r for r in range(1, int(np.sqrt(m)) + 1) if m % r == 0)
        return rows, m // rows
    rows, cols = (int(s) for s in shape)
    if rows * cols != m:
        raise ValueError(f"grid2d shape {rows}x{cols} does not match m={m}")
    return rows, cols


def _components(m: int, edges: Iterable[tuple[int, int]]) -> list[list[int]]:
    edges = list(edges)
    if edges:
        rows, cols = zip(*edges)
    else:
        rows, cols = (), ()
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
    n, labels = connected_components(adj, directed=False)
    return [np.flatnonzero(labels == k).tolist() for k in range(n)]


def build_mixing(
    family: str,
    m: int,
    weighting: str = "metropolis",
    *,
    shape: Sequence[int] | None = None,
    edges: Iterable[tuple[int, int]] | None = None,
) -> MixingMatrix:
    """Build a mixing matrix for a standard graph family.

    Metropolis: ``W[i, j] = 1 / (1 + max(deg_i, deg_j))`` on edges, diagonal takes
    the remainder. Lazy-uniform: ``W = I/2 + M/2`` with ``M`` the max-degree
    weighting (``1/d_max`` on edges), which is ``I/2 + A/(2 deg)`` on regular graphs.
    """
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise ValueError(f"node count must be a positive integer, got {m!r}")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")
    m = int(m)
    edge_set = _graph_edges(family, m, shape=shape, edges=edges)
    comps = _components(m, edge_set)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)

    deg = np.zeros(m, dtype=int)
    for i, j in edge_set:
        deg[i] += 1
        deg[j] += 1

    W = np.zeros((m, m))
    if weighting == "metropolis":
        for i, j in edge_set:
            W[i, j] = W[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    else:
        dmax = max(int(deg.max()), 1)
        for i, j in edge_set:
            W[i, j] = W[j, i] = 0.5 / dmax
    off = W.sum(axis=1)
    W[np.diag_indices(m)] = 1.0 - off

    W.setflags(write=False)
    mat = MixingMatrix(
        weights=W,
        nu=_nu(W),
        edges=tuple(sorted(edge_set)),
        family=family,
        weighting=weighting,
    )
    validate_mixing(mat.weights).raise_if_failed()
    return mat


def _nu(W: np.ndarray) -> float:
    m = W.shape[0]
    dev = W - np.full((m, m), 1.0 / m)
    if np.array_equal(W, W.T):
        nu = float(np.max(np.abs(np.linalg.eigvalsh(dev))))
    else:
        nu = float(np.linalg.norm(dev, 2))
    # round-off of an exact averaging matrix
    if nu < m * np.finfo(float).eps:
        nu = 0.0
    return nu


def validate_mixing(W) -> ValidationReport:
    """Check each mixing invariant and record the worst violation magnitude."""
    W = np.asarray(W.weights if isinstance(W, MixingMatrix) else W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {W.shape}")
    m = W.shape[0]
    ones = np.ones(m)
    report = ValidationReport()

    sym = float(np.max(np.abs(W - W.T))) if m else 0.0
    report.add("symmetry", sym, sym == 0.0)
    rows = float(np.max(np.abs(W @ ones - ones)))
    report.add("row_sums", rows, rows <= STOCHASTIC_TOL)
    cols = float(np.max(np.abs(W.T @ ones - ones)))
    report.add("column_sums", cols, cols <= STOCHASTIC_TOL)
    neg = float(max(0.0, -W.min()))
    report.add("nonnegativity", neg, neg == 0.0)
    nu = _nu(W)
    report.add("nu_below_one", nu, nu < 1.0 - STOCHASTIC_TOL)
    return report


def spectral_gap(W) -> float:
    """Return ``nu = ||W - 11^T/m||_2`` after validating ``W``."""
    if isinstance(W, MixingMatrix):
        return W.nu
    W = np.asarray(W, dtype=float)
    validate_mixing(W).raise_if_failed()
    return _nu(W)


def mix(W, vectors) -> np.ndarray:
    """One gossip round: row ``i`` of the result is ``sum_j W[i, j] * vectors[j]``."""
    weights = W.weights if isinstance(W, MixingMatrix) else np.asarray(W, dtype=float)
    V = np.asarray(vectors, dtype=float)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[:, None]
    if V.ndim != 2 or V.shape[0] != weights.shape[0]:
        raise ValueError(
            f"expected {weights.shape[0]} node vectors, got array of shape {np.shape(vectors)}"
        )
    out = weights @ V
    return out[:, 0] if squeeze else out


def read_edge_list(path: str | Path) -> list[tuple[int, int]]:
    """Parse a whitespace-separated ``i j`` edge list; ``#`` starts a comment."""
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'i j', got {raw!r}")
        edges.append((int(parts[0]), int(parts[1])))
    return edges


def from_edge_file(path: str | Path, m: int | None = None, weighting: str = "metropolis") -> MixingMatrix:
    edges = read_edge_list(path)
    if m is None:
        m = 1 + max((max(e) for e in edges), default=0)
    return build_mixing("custom", m, weighting, edges=edges)
