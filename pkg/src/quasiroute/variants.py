"""Problem catalog, constraint parameters, node attributes and the multi-hot
problem descriptor.

Node layout of every instance: depots first (indices 0..depot_count-1), then
customers.  Under pickup-and-delivery the first half of the customers are
pickups and the second half their deliveries, pickup i pairing with i + m.
TSP-family instances have no depot at all.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidInputError, InvalidSizeError, InvalidSpecError
from .quasimetric import (
    DEFAULT_SCALER,
    DistanceMatrix,
    distance_from_json,
    distance_to_json,
    euclidean_matrix,
    gen_asymmetric,
    make_rng,
)

LAMBDA_FIELDS = (
    "demand", "prize", "penalty", "time", "depot",
    "pickup", "backhaul", "delivery", "sub_routes", "open_route",
)
OMEGA_FIELDS = ("demand", "prize", "penalty", "early", "late", "service")
XI_FIELDS = ("depot", "pickup", "delivery", "backhaul", "linehaul", "sub_routes", "open_route")
FLAG_NAMES = ("C", "O", "B", "BP", "L", "TW", "MD", "PC", "PD")


@dataclass(frozen=True)
class TimeWindowScheme:
    """Window width w ~ U(width_low, width_high) * horizon / 3, centred
    uniformly inside the interval in which a direct depot round trip stays
    feasible."""

    width_low: float = 0.2
    width_high: float = 0.6


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    C: bool = False
    O: bool = False
    B: bool = False
    BP: bool = False
    L: bool = False
    TW: bool = False
    MD: bool = False
    PC: bool = False
    PD: bool = False
    orienteering: bool = False
    stochastic: bool = False
    symmetric: bool = True
    capacity: int = 50
    duration_limit: float = 3.0
    depot_count: int = 1
    tw_horizon: tuple[float, float] = (0.0, 3.0)
    service_time: float = 0.2
    backhaul_fraction: float = 0.2
    op_max_length: float = 4.0
    pc_min_prize: float = 1.0
    penalty_k: float = 4.0
    tw_scheme: TimeWindowScheme = field(default_factory=TimeWindowScheme)

    @property
    def flags(self) -> dict[str, bool]:
        return {f: getattr(self, f) for f in FLAG_NAMES}

    @property
    def has_depot(self) -> bool:
        return any(self.flags.values()) or self.orienteering

    @property
    def is_tsp(self) -> bool:
        return not self.has_depot

    @property
    def backhaul(self) -> bool:
        return self.B or self.BP

    @property
    def prize_variant(self) -> bool:
        return self.PC or self.orienteering

    @property
    def multi_route(self) -> bool:
        """Whether a solution may contain several depot-rooted routes."""
        return self.C

    @property
    def n_depots(self) -> int:
        return self.depot_count if self.has_depot else 0

    def check(self) -> "ProblemSpec":
        if self.PD and self.backhaul:
            raise InvalidSpecError(f"{self.name}: pickup-delivery excludes backhauls")
        if self.BP and not self.B:
            raise InvalidSpecError(f"{self.name}: BP requires the B flag")
        if self.PC and self.C:
            raise InvalidSpecError(f"{self.name}: prize-collecting variants are uncapacitated")
        if self.backhaul and not self.C:
            raise InvalidSpecError(f"{self.name}: backhauls need capacity")
        if self.MD and self.depot_count != 3:
            raise InvalidSpecError(f"{self.name}: MD requires three depots")
        if not self.MD and self.depot_count != 1:
            raise InvalidSpecError(f"{self.name}: single-depot variant with depot_count={self.depot_count}")
        if self.orienteering and (self.PC or self.C):
            raise InvalidSpecError(f"{self.name}: orienteering is a standalone objective")
        if (self.O or self.L or self.TW or self.MD) and not self.C:
            raise InvalidSpecError(f"{self.name}: O/L/TW/MD only appear on capacitated variants")
        return self


_NAME_RE = re.compile(
    r"^(?P<A>A)?(?P<MD>MD)?(?P<O>O(?=CVRP|PDCVRP))?"
    r"(?P<base>CVRP|TSP|OP|PCTSP|SPCTSP|PDTSP|PDCVRP)"
    r"(?P<back>BP|B)?(?P<L>L)?(?P<TW>TW)?$"
)


def parse_problem_name(name: str) -> ProblemSpec:
    """Build a ProblemSpec from a catalog-style variant name such as AOCVRPBLTW."""
    m = _NAME_RE.match(name)
    if not m:
        raise InvalidSpecError(f"unrecognised problem name {name!r}")
    base = m["base"]
    if base != "CVRP" and (m["back"] or m["L"] or m["TW"]):
        raise InvalidSpecError(f"suffixes only apply to CVRP variants: {name!r}")
    if m["MD"] and base != "CVRP":
        raise InvalidSpecError(f"multi-depot only applies to CVRP variants: {name!r}")
    symmetric = m["A"] is None
    kw = dict(name=name, symmetric=symmetric)
    if base in ("CVRP", "PDCVRP"):
        kw["C"] = True
    if base in ("PDTSP", "PDCVRP"):
        kw["PD"] = True
    if base in ("PCTSP", "SPCTSP"):
        kw["PC"] = True
        kw["stochastic"] = base == "SPCTSP"
    if base == "OP":
        kw["orienteering"] = True
    kw["O"] = bool(m["O"])
    kw["MD"] = bool(m["MD"])
    kw["B"] = m["back"] in ("B", "BP")
    kw["BP"] = m["back"] == "BP"
    kw["L"] = bool(m["L"])
    kw["TW"] = bool(m["TW"])
    kw["depot_count"] = 3 if kw["MD"] else 1
    kw["capacity"] = 20 if base == "PDCVRP" else 50
    if not symmetric:
        kw.update(duration_limit=0.6, tw_horizon=(0.0, 1.0), op_max_length=1.0)
    return ProblemSpec(**kw).check()


def make_spec(name: str, **overrides) -> ProblemSpec:
    spec = parse_problem_name(name)
    return replace(spec, **overrides).check() if overrides else spec


SEEN_PROBLEMS = (
    "ATSP", "TSP", "CVRP", "ACVRP", "OP", "PCTSP", "PDTSP",
    "CVRPTW", "OCVRP", "CVRPB", "OCVRPTW", "ACVRPBTW",
)

_SYMMETRIC_CVRP_SUFFIXES = (
    "", "TW", "L", "B", "LTW", "BTW", "BL", "BLTW",
    "BP", "BPL", "BPTW", "BPLTW",
)


def _symmetric_names() -> list[str]:
    names = ["TSP", "OP", "PCTSP", "SPCTSP", "PDTSP", "PDCVRP", "OPDCVRP"]
    for md in ("", "MD"):
        for o in ("", "O"):
            for suffix in _SYMMETRIC_CVRP_SUFFIXES:
                names.append(f"{md}{o}CVRP{suffix}")
    return names


def catalog() -> list[tuple[str, ProblemSpec]]:
    """All 110 variants: 55 symmetric problems and their asymmetric twins,
    seen (training) problems first."""
    sym = _symmetric_names()
    every = sym + ["A" + s for s in sym]
    ordered = list(SEEN_PROBLEMS) + [s for s in every if s not in SEEN_PROBLEMS]
    return [(name, parse_problem_name(name)) for name in ordered]


def catalog_names() -> list[str]:
    return [name for name, _ in catalog()]


def build_lambda(spec: ProblemSpec) -> np.ndarray:
    """10-bit multi-hot descriptor; there is deliberately no symmetry bit."""
    spec.check()
    bits = {
        "demand": spec.C,
        "prize": spec.prize_variant,
        "penalty": spec.PC,
        "time": spec.TW,
        "depot": spec.has_depot,
        "pickup": spec.PD,
        "backhaul": spec.backhaul,
        "delivery": spec.C or spec.PD,
        "sub_routes": spec.multi_route,
        "open_route": spec.O,
    }
    return np.array([int(bits[f]) for f in LAMBDA_FIELDS], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Instance:
    spec: ProblemSpec
    dist: DistanceMatrix
    coords: Optional[np.ndarray]
    demand: np.ndarray      # signed, normalised by capacity
    prize: np.ndarray
    penalty: np.ndarray
    tw_early: np.ndarray
    tw_late: np.ndarray
    service: np.ndarray
    depots: tuple[int, ...]
    pd_pairs: tuple[tuple[int, int], ...] = ()
    seed: Optional[int] = None

    @property
    def n_nodes(self) -> int:
        return self.dist.n

    @property
    def customers(self) -> list[int]:
        return list(range(len(self.depots), self.n_nodes))

    @property
    def n_customers(self) -> int:
        return self.n_nodes - len(self.depots)

    @property
    def d(self) -> np.ndarray:
        return self.dist.d

    @property
    def is_depot(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[list(self.depots)] = True
        return mask

    @property
    def is_linehaul(self) -> np.ndarray:
        return (self.demand > 0) & ~self.is_depot & self.spec.C & (not self.spec.PD)

    @property
    def is_backhaul(self) -> np.ndarray:
        return (self.demand < 0) & self.spec.backhaul

    @property
    def pickup_of(self) -> np.ndarray:
        """For each delivery node the index of its pickup, -1 elsewhere."""
        out = np.full(self.n_nodes, -1, dtype=np.int64)
        for p, q in self.pd_pairs:
            out[q] = p
        return out

    @property
    def is_pickup(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        for p, _ in self.pd_pairs:
            mask[p] = True
        return mask

    @property
    def is_delivery(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        for _, q in self.pd_pairs:
            mask[q] = True
        return mask

    @property
    def pc_threshold(self) -> float:
        """Prize that must be collected before returning; capped by what exists."""
        if not self.spec.PC:
            return 0.0
        return min(self.spec.pc_min_prize, float(self.prize.sum()))

    def omega(self) -> np.ndarray:
        """Attribute block of the unified representation, time fields scaled to [0, 1]."""
        horizon = self.spec.tw_horizon[1] if self.spec.TW else 1.0
        om = np.zeros((self.n_nodes, len(OMEGA_FIELDS)))
        if self.spec.C:
            om[:, 0] = self.demand
        if self.spec.prize_variant:
            om[:, 1] = self.prize
        if self.spec.PC:
            om[:, 2] = self.penalty
        if self.spec.TW:
            om[:, 3] = self.tw_early / horizon
            om[:, 4] = self.tw_late / horizon
            om[:, 5] = self.service / horizon
        return om

    def xi(self) -> np.ndarray:
        x = np.zeros((self.n_nodes, len(XI_FIELDS)))
        x[:, 0] = self.is_depot
        x[:, 1] = self.is_pickup
        x[:, 2] = self.is_delivery
        x[:, 3] = self.is_backhaul
        x[:, 4] = self.is_linehaul
        if self.spec.multi_route:
            x[:, 5] = 1.0
        if self.spec.O:
            x[:, 6] = 1.0
        return x


def _sample_time_windows(spec: ProblemSpec, d: np.ndarray, depots, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = d.shape[0]
    e0, l0 = spec.tw_horizon
    early = np.zeros(n)
    late = np.zeros(n)
    service = np.zeros(n)
    early[list(depots)] = e0
    late[list(depots)] = l0
    dep = list(depots)
    for i in range(len(dep), n):
        # feasible from every depot: arrive no earlier than the farthest
        # outbound leg, finish early enough for the farthest return leg
        lo = e0 + float(d[dep, i].max())
        hi = l0 - spec.service_time - float(d[i, dep].max())
        if hi < lo:
            return None
        w = rng.uniform(spec.tw_scheme.width_low, spec.tw_scheme.width_high) * (l0 - e0) / 3.0
        w = min(w, hi - lo)
        # max() guards the one-ulp crossing when w was clipped to hi - lo
        c = rng.uniform(lo + w / 2, max(lo + w / 2, hi - w / 2))
        early[i] = max(e0, c - w / 2)
        late[i] = c + w / 2
        service[i] = spec.service_time
    return early, late, service


def _round_trips_ok(spec: ProblemSpec, d: np.ndarray, depots) -> bool:
    dep = list(depots)
    cust = np.arange(len(dep), d.shape[0])
    if cust.size == 0:
        return True
    trip = d[np.ix_(dep, cust)].max(axis=0) + d[np.ix_(cust, dep)].max(axis=1)
    if spec.L and np.any(trip > spec.duration_limit):
        return False
    if spec.orienteering and np.any(trip > spec.op_max_length):
        return False
    return True


MAX_GEOMETRY_DRAWS = 1000


def sample_geometry(spec: ProblemSpec, n_nodes: int, rng, scaler: float = DEFAULT_SCALER):
    if spec.symmetric:
        pts = rng.random((n_nodes, 2))
        return pts, DistanceMatrix(euclidean_matrix(pts), is_symmetric=True)
    return None, gen_asymmetric(n_nodes, rng, scaler)


def sample_attributes(spec: ProblemSpec, n: int, seed, d: Optional[np.ndarray] = None) -> dict:
    """Constraint data for ``n`` customers (plus the spec's depots).

    Returns a dict of per-node arrays and metadata. Time windows need the
    distance matrix; pass ``d`` when the spec has TW.
    """
    rng = make_rng(seed)
    nd = spec.n_depots
    N = n + nd
    if n < 1:
        raise InvalidSizeError("need at least one customer")
    if spec.PD and n % 2:
        raise InvalidSizeError("pickup-delivery needs an even customer count")
    if spec.MD and N <= spec.depot_count:
        raise InvalidSizeError("multi-depot instance needs customers")
    depots = tuple(range(nd))
    demand = np.zeros(N)
    prize = np.zeros(N)
    penalty = np.zeros(N)
    pairs: tuple = ()
    if spec.PD:
        m = n // 2
        pairs = tuple((nd + i, nd + m + i) for i in range(m))
        if spec.C:
            q = rng.integers(1, 10, size=m) / spec.capacity
            for (p, dl), qi in zip(pairs, q):
                demand[p] = -qi
                demand[dl] = qi
    elif spec.C:
        demand[nd:] = rng.integers(1, 10, size=n) / spec.capacity
        if spec.backhaul:
            k = int(math.floor(spec.backhaul_fraction * n))
            chosen = rng.choice(n, size=k, replace=False)
            demand[nd + chosen] *= -1
    if spec.prize_variant:
        prize[nd:] = rng.uniform(0.0, 4.0 / n, size=n)
    if spec.PC:
        penalty[nd:] = rng.uniform(0.0, 3.0 * spec.penalty_k / n, size=n)
    out = dict(demand=demand, prize=prize, penalty=penalty, depots=depots, pd_pairs=pairs)
    if spec.TW:
        if d is None:
            raise InvalidInputError("time windows need the distance matrix")
        tw = _sample_time_windows(spec, d, depots, rng)
        if tw is None:
            raise InvalidInputError("geometry admits no feasible time window")
        out["tw_early"], out["tw_late"], out["service"] = tw
    else:
        out["tw_early"] = np.zeros(N)
        out["tw_late"] = np.zeros(N)
        out["service"] = np.zeros(N)
    return out


def generate_instance(spec: ProblemSpec, n: int, seed, scaler: float = DEFAULT_SCALER) -> Instance:
    """Draw a complete instance with ``n`` customers (TSP-family: ``n`` nodes).

    Asymmetric geometries that leave some customer unreachable within the
    duration limit or time horizon are redrawn from the same stream.
    """
    rng = make_rng(seed)
    n_nodes = n + spec.n_depots
    attr_seed = int(rng.integers(0, 2**63))
    for _ in range(MAX_GEOMETRY_DRAWS):
        coords, dist = sample_geometry(spec, n_nodes, rng, scaler)
        depots = tuple(range(spec.n_depots))
        if spec.has_depot and not _round_trips_ok(spec, dist.d, depots):
            continue
        try:
            attrs = sample_attributes(spec, n, attr_seed, d=dist.d)
        except InvalidInputError:
            continue
        return Instance(
            spec=spec, dist=dist, coords=coords, seed=None if isinstance(seed, np.random.Generator) else int(seed),
            demand=attrs["demand"], prize=attrs["prize"], penalty=attrs["penalty"],
            tw_early=attrs["tw_early"], tw_late=attrs["tw_late"], service=attrs["service"],
            depots=attrs["depots"], pd_pairs=attrs["pd_pairs"],
        )
    raise InvalidInputError(f"could not draw a feasible {spec.name} geometry with n={n}")


def build_udr(instance: Instance, embedding) -> np.ndarray:
    """Per-node features [Phi | omega | xi]."""
    phi = embedding.coords if hasattr(embedding, "coords") else np.asarray(embedding)
    if phi.shape[0] != instance.n_nodes:
        raise InvalidInputError(
            f"embedding has {phi.shape[0]} rows for an instance of {instance.n_nodes} nodes"
        )
    return np.concatenate([phi, instance.omega(), instance.xi()], axis=1)


def instance_with_dist(instance: Instance, dist: DistanceMatrix, coords=None) -> Instance:
    return replace(instance, dist=dist, coords=coords)


def _round12(x: float) -> float:
    return float(f"{x:.12g}")


def _vec(a) -> list[float]:
    return [_round12(v) for v in np.asarray(a, dtype=np.float64)]


def instance_to_json(inst: Instance) -> dict:
    doc = distance_to_json(inst.dist, inst.coords, inst.seed, include_matrix=not inst.spec.symmetric or inst.coords is None)
    doc.update(
        problem=inst.spec.name,
        capacity=inst.spec.capacity,
        depots=list(inst.depots),
        pd_pairs=[list(p) for p in inst.pd_pairs],
        demand=_vec(inst.demand),
        prize=_vec(inst.prize),
        penalty=_vec(inst.penalty),
        tw_early=_vec(inst.tw_early),
        tw_late=_vec(inst.tw_late),
        service=_vec(inst.service),
    )
    return doc


def instance_from_json(doc: dict) -> Instance:
    coords, dist = distance_from_json(doc)
    name = doc.get("problem", "TSP" if doc.get("symmetric", True) else "ATSP")
    spec = make_spec(name)
    if "capacity" in doc and spec.C and doc["capacity"] != spec.capacity:
        spec = replace(spec, capacity=int(doc["capacity"]))
    N = dist.n
    zeros = [0.0] * N
    depots = tuple(doc.get("depots", list(range(spec.n_depots))))
    return Instance(
        spec=spec, dist=dist, coords=coords, seed=doc.get("seed"),
        demand=np.asarray(doc.get("demand", zeros), dtype=np.float64),
        prize=np.asarray(doc.get("prize", zeros), dtype=np.float64),
        penalty=np.asarray(doc.get("penalty", zeros), dtype=np.float64),
        tw_early=np.asarray(doc.get("tw_early", zeros), dtype=np.float64),
        tw_late=np.asarray(doc.get("tw_late", zeros), dtype=np.float64),
        service=np.asarray(doc.get("service", zeros), dtype=np.float64),
        depots=depots,
        pd_pairs=tuple(tuple(p) for p in doc.get("pd_pairs", [])),
    )


def dumps_instance(inst: Instance) -> str:
    return json.dumps(instance_to_json(inst), indent=1)


def loads_instance(text: str) -> Instance:
    return instance_from_json(json.loads(text))
