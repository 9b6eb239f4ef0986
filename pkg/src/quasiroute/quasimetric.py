"""Quasimetric distance structures: generation, closure, validation, symmetrization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DegenerateMetricError,
    InvalidInputError,
    InvalidParameterError,
    InvalidSizeError,
)

TRIANGLE_TOL = 1e-9
DEFAULT_SCALER = 1e6
ASYM_HIGH = 10**6


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; accepts ints up to 64 bits or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.uint64(int(seed) % 2**64))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Dense n x n cost matrix with a symmetry flag recorded at construction."""

    d: np.ndarray
    is_symmetric: bool

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise InvalidInputError(f"distance matrix must be square, got shape {d.shape}")
        object.__setattr__(self, "d", _frozen(d))

    @property
    def n(self) -> int:
        return self.d.shape[0]

    def __getitem__(self, idx):
        return self.d[idx]

    def violations(self, tol: float = TRIANGLE_TOL, sample: Optional[int] = None, seed=0) -> list[str]:
        """List invariant violations (empty means a valid quasimetric)."""
        return check_quasimetric(self.d, tol=tol, symmetric=self.is_symmetric, sample=sample, seed=seed)

    def validate(self, tol: float = TRIANGLE_TOL) -> "DistanceMatrix":
        problems = self.violations(tol)
        if problems:
            raise DegenerateMetricError("; ".join(problems[:5]))
        return self


def max_triangle_violation(d: np.ndarray) -> float:
    """max over (i, j, k) of d[i, j] - (d[i, k] + d[k, j]); <= 0 for a quasimetric."""
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    worst = -np.inf
    for k in range(n):
        via = d[:, k, None] + d[None, k, :]
        worst = max(worst, float(np.max(d - via)))
    return worst if n else 0.0


def sampled_triangle_violation(d: np.ndarray, n_samples: int, seed=0) -> float:
    rng = make_rng(seed)
    n = d.shape[0]
    i, j, k = (rng.integers(0, n, size=n_samples) for _ in range(3))
    return float(np.max(d[i, j] - d[i, k] - d[k, j]))


def check_quasimetric(
    d: np.ndarray,
    tol: float = TRIANGLE_TOL,
    symmetric: bool = False,
    sample: Optional[int] = None,
    seed=0,
) -> list[str]:
    """Exhaustive triangle check for n <= 50 unless ``sample`` forces sampled triples."""
    d = np.asarray(d, dtype=np.float64)
    out = []
    n = d.shape[0]
    if not np.all(np.isfinite(d)):
        out.append("non-finite entry")
        return out
    if np.any(np.diag(d) != 0):
        out.append("non-zero diagonal")
    off = ~np.eye(n, dtype=bool)
    if np.any(d[off] <= 0):
        out.append("non-positive off-diagonal entry")
    if symmetric and not np.array_equal(d, d.T):
        out.append("matrix flagged symmetric but d != d^T")
    if sample is None and n > 50:
        sample = 200_000
    worst = max_triangle_violation(d) if sample is None else sampled_triangle_violation(d, sample, seed)
    if worst > tol:
        out.append(f"triangle inequality violated by {worst:.3e}")
    return out


def euclidean_matrix(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def gen_euclidean(n: int, seed) -> tuple[np.ndarray, DistanceMatrix]:
    """Uniform points in the unit square and their Euclidean distance matrix."""
    if n < 1:
        raise InvalidSizeError("n must be >= 1")
    rng = make_rng(seed)
    pts = rng.random((n, 2))
    return pts, DistanceMatrix(euclidean_matrix(pts), is_symmetric=True)


def _draw_asymmetric_integers(n: int, rng: np.random.Generator) -> np.ndarray:
    raw = rng.integers(0, ASYM_HIGH, size=(n, n), dtype=np.int64)
    np.fill_diagonal(raw, 0)
    off = ~np.eye(n, dtype=bool)
    zeros = (raw == 0) & off
    while np.any(zeros):
        raw[zeros] = rng.integers(0, ASYM_HIGH, size=int(zeros.sum()), dtype=np.int64)
        zeros = (raw == 0) & off
    return raw


def _closure_array(d: np.ndarray) -> np.ndarray:
    # Floyd-Warshall passes until a fixpoint; the first pass already converges
    # in exact arithmetic, the loop guards against float rounding.
    d = d.copy()
    n = d.shape[0]
    while True:
        before = d.copy()
        for k in range(n):
            np.minimum(d, d[:, k, None] + d[None, k, :], out=d)
        if np.array_equal(before, d):
            return d


def min_plus_closure(d, symmetric: Optional[bool] = None) -> DistanceMatrix:
    """All-pairs shortest-path closure of a non-negative cost matrix."""
    arr = d.d if isinstance(d, DistanceMatrix) else np.asarray(d, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError("cost matrix must be square")
    if np.any(arr < 0):
        raise InvalidInputError("negative cost entry")
    if np.any(np.diag(arr) != 0):
        raise InvalidInputError("diagonal must be zero")
    closed = _closure_array(arr.astype(np.float64))
    if symmetric is None:
        symmetric = bool(np.array_equal(closed, closed.T))
    return DistanceMatrix(closed, is_symmetric=symmetric)


def gen_asymmetric(n: int, seed, scaler: float = DEFAULT_SCALER) -> DistanceMatrix:
    """Random integer costs closed under min-plus, then divided by ``scaler``."""
    if scaler <= 0:
        raise InvalidParameterError("scaler must be positive")
    if n < 1:
        raise InvalidSizeError("n must be >= 1")
    rng = make_rng(seed)
    raw = _draw_asymmetric_integers(n, rng)
    closed_int = _closure_array(raw)
    scaled = closed_int.astype(np.float64) / float(scaler)
    # Division can break a triangle by one ulp; re-close in floating point.
    return DistanceMatrix(_closure_array(scaled), is_symmetric=False)


def _as_array(d) -> np.ndarray:
    return d.d if isinstance(d, DistanceMatrix) else np.asarray(d, dtype=np.float64)


def symmetrize_max(d) -> DistanceMatrix:
    a = _as_array(d)
    return DistanceMatrix(np.maximum(a, a.T), is_symmetric=True)


def symmetrize_mean(d) -> DistanceMatrix:
    a = _as_array(d)
    if isinstance(d, DistanceMatrix) and d.is_symmetric:
        return DistanceMatrix(a, is_symmetric=True)
    return DistanceMatrix((a + a.T) / 2.0, is_symmetric=True)


def zscore_normalize(d) -> np.ndarray:
    a = _as_array(d)
    std = a.std()
    if std < 1e-12:
        return np.zeros_like(a)
    return (a - a.mean()) / std


def _round12(x: float) -> float:
    return float(f"{x:.12g}")


def distance_to_json(dist: DistanceMatrix, coords=None, seed=None, include_matrix: bool = True) -> dict:
    doc = {"n": dist.n, "symmetric": bool(dist.is_symmetric), "seed": seed}
    if coords is not None:
        doc["coords"] = [[_round12(v) for v in row] for row in np.asarray(coords)]
    if include_matrix or coords is None:
        doc["matrix"] = [[_round12(v) for v in row] for row in dist.d]
    return doc


def distance_from_json(doc: dict) -> tuple[Optional[np.ndarray], DistanceMatrix]:
    coords = np.asarray(doc["coords"], dtype=np.float64) if doc.get("coords") is not None else None
    if doc.get("matrix") is not None:
        mat = np.asarray(doc["matrix"], dtype=np.float64)
    elif coords is not None:
        mat = euclidean_matrix(coords)
    else:
        raise InvalidInputError("instance JSON needs either 'matrix' or 'coords'")
    if mat.shape != (doc["n"], doc["n"]):
        raise InvalidInputError(f"matrix shape {mat.shape} does not match n={doc['n']}")
    return coords, DistanceMatrix(mat, is_symmetric=bool(doc["symmetric"]))


def dumps_distance(dist: DistanceMatrix, coords=None, seed=None) -> str:
    return json.dumps(distance_to_json(dist, coords, seed))
