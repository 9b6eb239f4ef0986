"""Pivot selection, bidirectional Frechet coordinates, Bourgain embedding and
the separation / distortion diagnostics that go with them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateMetricError,
    InvalidInputError,
    InvalidParameterError,
    InvalidSizeError,
)
from .quasimetric import DistanceMatrix, make_rng


def _arr(d) -> np.ndarray:
    return d.d if isinstance(d, DistanceMatrix) else np.asarray(d, dtype=np.float64)


@dataclass(frozen=True)
class PivotSet:
    indices: tuple[int, ...]
    init_seeds: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "init_seeds", tuple(int(i) for i in self.init_seeds))
        if len(set(self.indices)) != len(self.indices):
            raise InvalidInputError("pivot indices must be distinct")
        if self.indices[: len(self.init_seeds)] != self.init_seeds:
            raise InvalidInputError("init_seeds must be a prefix of indices")

    @property
    def M(self) -> int:
        return len(self.indices)

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class BfrEmbedding:
    coords: np.ndarray
    norm_factor: float
    pivots: PivotSet

    @property
    def outgoing(self) -> np.ndarray:
        return self.coords[:, 0::2]

    @property
    def incoming(self) -> np.ndarray:
        return self.coords[:, 1::2]


@dataclass(frozen=True)
class BourgainConfig:
    n: int
    seed: int = 0
    repetitions: Optional[int] = None

    @property
    def scales(self) -> int:
        return max(1, int(math.floor(math.log2(self.n)))) if self.n >= 2 else 0

    @property
    def reps(self) -> int:
        if self.repetitions is not None:
            return int(self.repetitions)
        return max(1, int(math.ceil(math.log2(self.n)))) if self.n >= 2 else 1


def fps_select(d_fps, M: int, init_seeds: Sequence[int] = (), trace: Optional[list] = None) -> PivotSet:
    """Furthest-first traversal seeded with ``init_seeds``.

    Keeps a running minimum-distance cache; ties in the argmax resolve to the
    lowest node index.
    """
    D = _arr(d_fps)
    n = D.shape[0]
    seeds = [int(s) for s in init_seeds]
    if M > n:
        raise InvalidParameterError(f"cannot select {M} pivots from {n} nodes")
    if len(set(seeds)) != len(seeds):
        raise InvalidInputError("duplicate init seeds")
    if len(seeds) > M:
        raise InvalidParameterError("more init seeds than pivots")
    if any(s < 0 or s >= n for s in seeds):
        raise InvalidInputError("init seed out of range")

    chosen = list(seeds)
    cache = np.full(n, np.inf)
    for p in chosen:
        np.minimum(cache, D[:, p], out=cache)
    for p in chosen:
        cache[p] = -np.inf
    if trace is not None:
        trace.append(list(chosen))
    while len(chosen) < M:
        p = int(np.argmax(cache))
        chosen.append(p)
        np.minimum(cache, D[:, p], out=cache)
        cache[chosen] = -np.inf
        if trace is not None:
            trace.append(list(chosen))
    return PivotSet(tuple(chosen), tuple(seeds))


def bfr_embed(d, pivots: PivotSet) -> BfrEmbedding:
    D = _arr(d)
    if len(pivots) == 0:
        raise InvalidParameterError("empty pivot set")
    idx = np.asarray(pivots.indices)
    if np.any(idx < 0) or np.any(idx >= D.shape[0]):
        raise InvalidInputError("pivot index out of range")
    M = len(idx)
    scale = 1.0 / math.sqrt(2 * M)
    coords = np.empty((D.shape[0], 2 * M))
    coords[:, 0::2] = D[:, idx]
    coords[:, 1::2] = D[idx, :].T
    coords *= scale
    return BfrEmbedding(coords, scale, pivots)


def outgoing_embed(d, pivots: PivotSet) -> np.ndarray:
    """Unidirectional variant (outgoing distances only), scaled by 1/sqrt(M)."""
    D = _arr(d)
    idx = np.asarray(pivots.indices)
    return D[:, idx] / math.sqrt(len(idx))


def covering_radius(d_ref, pivots) -> float:
    D = _arr(d_ref)
    idx = list(pivots.indices if isinstance(pivots, PivotSet) else pivots)
    return float(np.max(np.min(D[:, idx], axis=1)))


def separation_score(d, pivots: PivotSet, i: int, j: int) -> float:
    if i == j:
        raise InvalidInputError("separation score needs distinct nodes")
    D = _arr(d)
    idx = np.asarray(pivots.indices)
    out_gap = np.abs(D[i, idx] - D[j, idx])
    in_gap = np.abs(D[idx, i] - D[idx, j])
    return float(max(out_gap.max(), in_gap.max()))


def separation_matrix(d, pivots: PivotSet) -> np.ndarray:
    """All-pairs separation scores (diagonal is zero)."""
    D = _arr(d)
    idx = np.asarray(pivots.indices)
    out = D[:, idx]
    inc = D[idx, :].T
    s_out = np.abs(out[:, None, :] - out[None, :, :]).max(axis=-1)
    s_in = np.abs(inc[:, None, :] - inc[None, :, :]).max(axis=-1)
    return np.maximum(s_out, s_in)


def subset_embed(d_metric, subsets: Sequence[Sequence[int]]) -> np.ndarray:
    """Unscaled distance-to-subset coordinates; an empty subset maps to diam(V)."""
    D = _arr(d_metric)
    diam = float(D.max())
    cols = []
    for A in subsets:
        A = list(A)
        cols.append(np.full(D.shape[0], diam) if not A else D[:, A].min(axis=1))
    return np.stack(cols, axis=1)


def bourgain_subsets(cfg: BourgainConfig) -> list[list[int]]:
    rng = make_rng(cfg.seed)
    subsets = []
    for j in range(1, cfg.scales + 1):
        for _ in range(cfg.reps):
            keep = rng.random(cfg.n) < 2.0**-j
            subsets.append(np.flatnonzero(keep).tolist())
    return subsets


def bourgain_embed(d_metric, cfg: BourgainConfig) -> np.ndarray:
    D = _arr(d_metric)
    n = D.shape[0]
    if n < 2:
        raise InvalidSizeError("Bourgain embedding needs at least two nodes")
    if cfg.n != n:
        cfg = BourgainConfig(n=n, seed=cfg.seed, repetitions=cfg.repetitions)
    subsets = bourgain_subsets(cfg)
    return subset_embed(D, subsets) / math.sqrt(cfg.scales * cfg.reps)


def pairwise_norms(emb: np.ndarray) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def distortion(d_ref, embedding: np.ndarray) -> tuple[float, float, float]:
    """(alpha, beta, beta/alpha) over all unordered pairs; inf when a pair collapses."""
    D = _arr(d_ref)
    n = D.shape[0]
    if n < 2:
        raise InvalidSizeError("distortion needs at least two nodes")
    iu = np.triu_indices(n, k=1)
    ref = D[iu]
    if np.any(ref <= 0):
        raise DegenerateMetricError("zero reference distance between distinct nodes")
    ratios = pairwise_norms(np.asarray(embedding, dtype=np.float64))[iu] / ref
    alpha, beta = float(ratios.min()), float(ratios.max())
    return alpha, beta, (beta / alpha if alpha > 0 else math.inf)


def multiview_pivot_seeds(n_nodes: int, depot_set: Sequence[int], n_aug: int, seed) -> list[list[int]]:
    """Seed lists for inference-time views.

    The first min(n_aug, #customers) views walk a fixed random permutation of
    the customers, one per view; any further views use two random customers.
    """
    if n_aug < 1:
        raise InvalidParameterError("n_aug must be >= 1")
    depots = [int(x) for x in depot_set]
    customers = [v for v in range(n_nodes) if v not in set(depots)]
    if not customers:
        return [list(depots) for _ in range(n_aug)]
    rng = make_rng(seed)
    perm = rng.permutation(customers)
    views = [depots + [int(perm[a])] for a in range(min(n_aug, len(customers)))]
    while len(views) < n_aug:
        if len(customers) >= 2:
            pair = rng.choice(customers, size=2, replace=False)
            views.append(depots + [int(pair[0]), int(pair[1])])
        else:
            views.append(depots + [customers[0]])
    return views


def training_pivot_seeds(n_nodes: int, depot_set: Sequence[int], rng, stochastic: bool = True) -> list[int]:
    """Depot set plus one uniformly drawn customer (or the depots alone)."""
    depots = [int(x) for x in depot_set]
    customers = [v for v in range(n_nodes) if v not in set(depots)]
    if not stochastic or not customers:
        return depots
    return depots + [int(customers[rng.integers(len(customers))])]
