import numpy as np
import pytest
from hypothesis import given, strategies as st

from quasiroute.env import validate_solution
from quasiroute.errors import (
    DegenerateMetricError, InvalidInputError, ParseError, QuasirouteError, UnsupportedFormatError,
)
from quasiroute.quasimetric import check_quasimetric
from quasiroute.vrplib import fixture_text, parse_vrplib, to_instance

FIXTURE = fixture_text()
HEADER_LINES = FIXTURE.splitlines()[:6]
BODY = "\n".join(FIXTURE.splitlines()[6:])

TINY = """NAME : tiny
TYPE : CVRP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
CAPACITY : 10
NODE_COORD_SECTION
1 0 0
2 3 0
3 0 4
DEMAND_SECTION
1 0
2 4
3 5
DEPOT_SECTION
1
-1
EOF
"""


def swap(text, old, new):
    assert old in text
    return text.replace(old, new, 1)


class TestFixture:
    def test_fields(self):
        vi = parse_vrplib(FIXTURE)
        assert (vi.name, vi.dimension, vi.capacity, vi.depot) == ("X-n9-k3", 9, 30, 0)
        assert int(vi.demands.sum()) == 62
        assert vi.demands.tolist() == [0, 9, 7, 12, 4, 11, 6, 8, 5]

    def test_instance(self):
        inst = to_instance(parse_vrplib(FIXTURE))
        assert inst.spec.name == "CVRP" and inst.spec.capacity == 30
        assert check_quasimetric(inst.d) == []
        assert inst.demand.sum() * 30 == pytest.approx(62)

    def test_tiny(self):
        vi = parse_vrplib(TINY)
        raw = vi.raw_distances()
        assert raw[1, 2] == 5.0 and raw[0, 1] == 3.0
        inst = to_instance(vi)
        assert inst.d[1, 2] == pytest.approx(1.0)  # bounding-box diagonal is 5
        assert check_quasimetric(inst.d) == []

    def test_nint_rounding(self):
        vi = parse_vrplib(swap(TINY, "2 3 0", "2 2.5 0"))
        assert vi.raw_distances()[0, 1] == 3.0

    def test_depot_moved_first(self):
        text = swap(swap(TINY, "DEPOT_SECTION\n1", "DEPOT_SECTION\n2"), "1 0\n2 4", "1 4\n2 0")
        inst = to_instance(parse_vrplib(text))
        assert inst.demand.tolist() == [0.0, 0.4, 0.5]

    def test_explicit_matrix(self):
        text = "\n".join([
            "DIMENSION: 3", "EDGE_WEIGHT_TYPE: EXPLICIT", "EDGE_WEIGHT_FORMAT: FULL_MATRIX",
            "EDGE_WEIGHT_SECTION", "0 5 2", "9 0 4", "1 7 0", "EOF",
        ])
        inst = to_instance(parse_vrplib(text))
        assert inst.spec.name == "ATSP"
        np.testing.assert_allclose(inst.d * 9, [[0, 5, 2], [5, 0, 4], [1, 6, 0]])

    def test_tsp_without_demands(self):
        text = "\n".join(l for l in TINY.splitlines() if "CAPACITY" not in l)
        text = text.split("DEMAND_SECTION")[0] + "EOF\n"
        inst = to_instance(parse_vrplib(text))
        assert inst.spec.name == "TSP" and validate_solution(inst, [0, 1, 2]) == []


class TestErrors:
    def test_depot_without_terminator(self):
        with pytest.raises(ParseError) as exc:
            parse_vrplib(swap(TINY, "1\n-1\n", "1\n"))
        assert exc.value.section == "DEPOT_SECTION" and "DEPOT_SECTION" in str(exc.value)

    def test_missing_dimension(self):
        with pytest.raises(ParseError):
            parse_vrplib(swap(TINY, "DIMENSION : 3\n", ""))

    def test_short_coords_names_line(self):
        with pytest.raises(ParseError) as exc:
            parse_vrplib(swap(TINY, "3 0 4\n", ""))
        assert exc.value.section == "NODE_COORD_SECTION" and exc.value.line == 6

    @pytest.mark.parametrize("old,new", [
        ("EUC_2D", "GEO"),
        ("EUC_2D", "ATT"),
        ("DEPOT_SECTION\n1\n", "DEPOT_SECTION\n1\n2\n"),
        ("EOF", "TOUR_SECTION\nEOF"),
    ])
    def test_unsupported(self, old, new):
        with pytest.raises(UnsupportedFormatError):
            parse_vrplib(swap(TINY, old, new))

    def test_unsupported_matrix_format(self):
        text = "DIMENSION: 2\nEDGE_WEIGHT_TYPE: EXPLICIT\nEDGE_WEIGHT_FORMAT: UPPER_ROW\nEDGE_WEIGHT_SECTION\n1\n"
        with pytest.raises(UnsupportedFormatError):
            parse_vrplib(text)

    def test_bad_number(self):
        with pytest.raises(ParseError) as exc:
            parse_vrplib(swap(TINY, "2 3 0", "2 x 0"))
        assert exc.value.line == 8

    def test_demand_over_capacity(self):
        with pytest.raises(InvalidInputError):
            to_instance(parse_vrplib(swap(TINY, "3 5", "3 11")))

    def test_coincident_nodes(self):
        with pytest.raises(DegenerateMetricError):
            to_instance(parse_vrplib(swap(TINY, "2 3 0", "2 0 0")))

    def test_depot_demand(self):
        with pytest.raises(ParseError):
            parse_vrplib(swap(TINY, "1 0\n2 4", "1 1\n2 4"))


class TestFuzz:
    @given(st.permutations(list(range(len(HEADER_LINES)))))
    def test_header_order_irrelevant(self, order):
        text = "\n".join(HEADER_LINES[k] for k in order) + "\n" + BODY
        a, b = to_instance(parse_vrplib(text)), to_instance(parse_vrplib(FIXTURE))
        assert np.array_equal(a.d, b.d) and np.array_equal(a.demand, b.demand)

    @given(st.integers(0, len(FIXTURE)))
    def test_truncation(self, cut):
        try:
            to_instance(parse_vrplib(FIXTURE[:cut]))
        except QuasirouteError:
            pass

    @given(st.data())
    def test_line_mutations(self, data):
        lines = FIXTURE.splitlines()
        k = data.draw(st.integers(0, len(lines) - 1))
        action = data.draw(st.sampled_from(["drop", "dup", "junk", "swap"]))
        if action == "drop":
            del lines[k]
        elif action == "dup":
            lines.insert(k, lines[k])
        elif action == "junk":
            lines[k] = data.draw(st.text(max_size=20))
        else:
            j = data.draw(st.integers(0, len(lines) - 1))
            lines[k], lines[j] = lines[j], lines[k]
        try:
            to_instance(parse_vrplib("\n".join(lines)))
        except QuasirouteError:
            pass
