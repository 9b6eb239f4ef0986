"""CVRPLIB / TSPLIB text ingestion.

Supports EUC_2D coordinates (integer-rounded distances, as benchmark optima
are quoted in that convention) and EXPLICIT full matrices.  Distances are
divided by the coordinate bounding-box diagonal (EUC_2D) or by the largest
entry (EXPLICIT) so instances live on the same unit scale as generated ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from importlib import resources
from typing import Optional

import numpy as np

from .errors import DegenerateMetricError, InvalidInputError, ParseError, UnsupportedFormatError
from .quasimetric import DistanceMatrix, euclidean_matrix, min_plus_closure
from .variants import Instance, make_spec

SUPPORTED_WEIGHT_TYPES = ("EUC_2D", "EXPLICIT")
SUPPORTED_WEIGHT_FORMATS = ("FULL_MATRIX",)
_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION", "EDGE_WEIGHT_SECTION")
_IGNORED_SECTIONS = ("DISPLAY_DATA_SECTION",)


@dataclass
class VrplibInstance:
    name: str
    dimension: int
    capacity: Optional[int]
    edge_weight_type: str
    coords: Optional[np.ndarray]      # (n, 2) raw file coordinates
    matrix: Optional[np.ndarray]      # raw explicit weights
    demands: Optional[np.ndarray]     # integer demands, file order
    depot: int = 0                    # 0-based
    comment: str = ""

    def raw_distances(self) -> np.ndarray:
        if self.edge_weight_type == "EUC_2D":
            # nint(x) = floor(x + 0.5), the TSPLIB convention
            return np.floor(euclidean_matrix(self.coords) + 0.5)
        return np.asarray(self.matrix, dtype=np.float64)

    def scale(self) -> float:
        if self.edge_weight_type == "EUC_2D":
            span = self.coords.max(axis=0) - self.coords.min(axis=0)
            return float(np.hypot(*span))
        return float(np.max(self.matrix))


def _number(tok: str, line: int, section: str):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"expected a number, got {tok!r}", line=line, section=section) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite value {tok!r}", line=line, section=section)
    return v


def _integer(tok: str, line: int, section: str) -> int:
    v = _number(tok, line, section)
    if v != int(v):
        raise ParseError(f"expected an integer, got {tok!r}", line=line, section=section)
    return int(v)


def parse_vrplib(text: str) -> VrplibInstance:
    """Parse a VRPLIB document.  Keys may appear in any order and use either
    ``KEY : value`` or ``KEY: value`` spacing."""
    if not isinstance(text, str):
        raise ParseError("VRPLIB input must be text")
    header: dict[str, str] = {}
    rows: dict[str, list[tuple[int, list[str]]]] = {}
    starts: dict[str, int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        head = line.split(":", 1)[0].strip().upper() if ":" in line else line.split()[0].upper()
        if head == "EOF":
            break
        if head in _SECTIONS or head in _IGNORED_SECTIONS:
            if head in rows:
                raise ParseError(f"duplicate section {head}", line=lineno, section=head)
            section = head
            rows[head] = []
            starts[head] = lineno
            continue
        if head.endswith("_SECTION"):
            raise UnsupportedFormatError(f"unsupported section {head}", line=lineno, section=head)
        if ":" in line and not line[0].isdigit() and not line[0] in "+-.":
            key, _, val = line.partition(":")
            key = key.strip().upper()
            if key.endswith("_SECTION"):
                raise UnsupportedFormatError(f"unsupported section {key}", line=lineno, section=key)
            header[key] = val.strip()
            section = None
            continue
        if section is None:
            raise ParseError(f"unexpected data line {line!r}", line=lineno)
        rows[section].append((lineno, line.split()))

    if "DIMENSION" not in header:
        raise ParseError("missing DIMENSION", section="SPECIFICATION")
    n = _integer(header["DIMENSION"], None, "DIMENSION")
    if n < 2:
        raise ParseError(f"DIMENSION must be at least 2, got {n}", section="DIMENSION")
    wtype = header.get("EDGE_WEIGHT_TYPE", "").upper()
    if wtype not in SUPPORTED_WEIGHT_TYPES:
        raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE {wtype or '(missing)'}",
                                     section="EDGE_WEIGHT_TYPE")
    capacity = None
    if "CAPACITY" in header:
        capacity = _integer(header["CAPACITY"], None, "CAPACITY")
        if capacity <= 0:
            raise ParseError("CAPACITY must be positive", section="CAPACITY")

    coords = matrix = None
    if wtype == "EUC_2D":
        coords = _node_table(rows, starts, "NODE_COORD_SECTION", n, 2, float)
    else:
        fmt = header.get("EDGE_WEIGHT_FORMAT", "").upper()
        if fmt not in SUPPORTED_WEIGHT_FORMATS:
            raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_FORMAT {fmt or '(missing)'}",
                                         section="EDGE_WEIGHT_FORMAT")
        matrix = _full_matrix(rows, starts, n)
        if "NODE_COORD_SECTION" in rows:
            coords = _node_table(rows, starts, "NODE_COORD_SECTION", n, 2, float)

    demands = None
    if "DEMAND_SECTION" in rows:
        demands = _node_table(rows, starts, "DEMAND_SECTION", n, 1, int)[:, 0].astype(np.int64)
        if np.any(demands < 0):
            raise ParseError("negative demand", section="DEMAND_SECTION")
        if capacity is None:
            raise ParseError("DEMAND_SECTION without CAPACITY", section="CAPACITY")
    elif capacity is not None:
        raise ParseError("missing DEMAND_SECTION", section="DEMAND_SECTION")

    depot = _depot(rows, starts, n)
    if demands is not None and demands[depot] != 0:
        raise ParseError("depot demand must be zero", section="DEMAND_SECTION")
    return VrplibInstance(
        name=header.get("NAME", ""), dimension=n, capacity=capacity, edge_weight_type=wtype,
        coords=coords, matrix=matrix, demands=demands, depot=depot, comment=header.get("COMMENT", ""),
    )


def _node_table(rows, starts, section: str, n: int, width: int, kind) -> np.ndarray:
    if section not in rows:
        raise ParseError(f"missing {section}", section=section)
    data = rows[section]
    if len(data) != n:
        raise ParseError(f"expected {n} entries, found {len(data)}", line=starts[section], section=section)
    out = np.full((n, width), np.nan)
    for lineno, toks in data:
        if len(toks) != width + 1:
            raise ParseError(f"expected {width + 1} fields, got {len(toks)}", line=lineno, section=section)
        idx = _integer(toks[0], lineno, section)
        if not 1 <= idx <= n:
            raise ParseError(f"node id {idx} outside 1..{n}", line=lineno, section=section)
        if not np.isnan(out[idx - 1, 0]):
            raise ParseError(f"node id {idx} repeated", line=lineno, section=section)
        conv = _integer if kind is int else _number
        out[idx - 1] = [conv(t, lineno, section) for t in toks[1:]]
    return out


def _full_matrix(rows, starts, n: int) -> np.ndarray:
    section = "EDGE_WEIGHT_SECTION"
    if section not in rows:
        raise ParseError(f"missing {section}", section=section)
    vals = [_number(t, lineno, section) for lineno, toks in rows[section] for t in toks]
    if len(vals) != n * n:
        raise ParseError(f"expected {n * n} weights, found {len(vals)}", line=starts[section], section=section)
    m = np.asarray(vals).reshape(n, n)
    if np.any(m < 0):
        raise ParseError("negative edge weight", section=section)
    return m


def _depot(rows, starts, n: int) -> int:
    section = "DEPOT_SECTION"
    if section not in rows:
        return 0
    ids = []
    for lineno, toks in rows[section]:
        for t in toks:
            v = _integer(t, lineno, section)
            if v == -1:
                if len(ids) != 1:
                    raise UnsupportedFormatError(f"expected exactly one depot, got {len(ids)}",
                                                 line=lineno, section=section)
                if not 1 <= ids[0] <= n:
                    raise ParseError(f"depot id {ids[0]} outside 1..{n}", line=lineno, section=section)
                return ids[0] - 1
            ids.append(v)
    raise ParseError("missing -1 terminator", line=starts[section], section=section)


def _reorder(n: int, depot: int) -> np.ndarray:
    return np.array([depot] + [i for i in range(n) if i != depot])


def to_instance(vi: VrplibInstance) -> Instance:
    """Convert to an Instance with the depot at index 0.

    Rounded distances can break the triangle inequality by a unit, so the
    matrix is repaired with a min-plus closure before normalization.
    """
    order = _reorder(vi.dimension, vi.depot)
    raw = vi.raw_distances()[np.ix_(order, order)]
    np.fill_diagonal(raw, 0.0)
    scale = vi.scale()
    if scale <= 0:
        raise DegenerateMetricError("all nodes coincide")
    off = ~np.eye(vi.dimension, dtype=bool)
    if np.any(raw[off] <= 0):
        raise DegenerateMetricError("two nodes are at zero distance")
    closed = min_plus_closure(raw)
    dist = DistanceMatrix(closed.d / scale, is_symmetric=closed.is_symmetric)
    n = vi.dimension
    zeros = np.zeros(n)
    if vi.demands is None:
        spec = make_spec("TSP" if dist.is_symmetric else "ATSP")
        demand = zeros
    else:
        spec = make_spec("CVRP" if dist.is_symmetric else "ACVRP")
        spec = replace(spec, capacity=int(vi.capacity))
        demand = vi.demands[order].astype(np.float64) / vi.capacity
        if np.any(demand > 1.0):
            raise InvalidInputError("a customer demand exceeds the vehicle capacity")
    return Instance(
        spec=spec, dist=dist, coords=None, demand=demand, prize=zeros, penalty=zeros,
        tw_early=zeros, tw_late=zeros, service=zeros,
        depots=(0,) if spec.has_depot else (), seed=None,
    )


def load_vrplib(path) -> Instance:
    with open(path, encoding="utf-8") as fh:
        return to_instance(parse_vrplib(fh.read()))


def fixture_text(name: str = "X-n9-k3.vrp") -> str:
    """Text of a bundled example file."""
    return resources.files("quasiroute").joinpath("data", name).read_text(encoding="utf-8")
