import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from quasiroute.errors import InvalidInputError, InvalidSizeError, InvalidSpecError
from quasiroute.pivots import PivotSet, bfr_embed
from quasiroute.quasimetric import gen_euclidean
from quasiroute.variants import (
    LAMBDA_FIELDS, SEEN_PROBLEMS, build_lambda, build_udr, catalog, catalog_names, dumps_instance,
    generate_instance, loads_instance, make_spec, parse_problem_name, sample_attributes,
)

TABLES = json.loads((Path(__file__).parent / "fixtures" / "lambda_tables.json").read_text())
# the published asymmetric table lists two rows twice and skips their BP twins;
# BP and B share a descriptor, so the B rows stand in for them
BP_STAND_INS = {"ACVRPBPTW": "ACVRPBTW", "AMDOCVRPBPLTW": "AMDOCVRPBLTW"}
SAMPLES = 10_000


def bits(*names):
    return [int(f in names) for f in LAMBDA_FIELDS]


class TestLambda:
    def test_tsp_empty(self):
        assert build_lambda(make_spec("TSP")).tolist() == [0] * 10

    def test_cvrp(self):
        assert build_lambda(make_spec("CVRP")).tolist() == bits("demand", "depot", "delivery", "sub_routes")

    def test_ocvrpbtw(self):
        assert build_lambda(make_spec("OCVRPBTW")).tolist() == bits(
            "demand", "time", "depot", "backhaul", "delivery", "sub_routes", "open_route"
        )

    def test_symmetry_invisible(self):
        for name, spec in catalog():
            if not name.startswith("A"):
                continue
            assert np.array_equal(build_lambda(spec), build_lambda(make_spec(name[1:])))

    @pytest.mark.parametrize("name", catalog_names())
    def test_matches_tables(self, name):
        row = TABLES.get(name) or TABLES[BP_STAND_INS[name]]
        assert build_lambda(make_spec(name)).tolist() == row

    def test_fixture_covers_catalog(self):
        assert set(catalog_names()) == set(TABLES) | set(BP_STAND_INS)


class TestCatalog:
    def test_length(self):
        names = catalog_names()
        assert len(names) == 110 and len(set(names)) == 110

    def test_seen_first(self):
        assert tuple(catalog_names()[:12]) == SEEN_PROBLEMS

    def test_acvrpbtw(self):
        s = make_spec("ACVRPBTW")
        assert s.C and s.B and s.TW and not s.symmetric
        assert (s.duration_limit, s.tw_horizon, s.op_max_length) == (0.6, (0.0, 1.0), 1.0)

    def test_pd_excludes_backhaul(self):
        for name, spec in catalog():
            if spec.PD:
                assert not spec.B and not spec.BP, name

    def test_md_three_depots(self):
        assert make_spec("MDCVRP").n_depots == 3
        assert make_spec("PDCVRP").capacity == 20

    @pytest.mark.parametrize("name", ["CVRPX", "TSPB", "MDTSP", "PDCVRPB", "cvrp"])
    def test_bad_names(self, name):
        with pytest.raises(InvalidSpecError):
            parse_problem_name(name)

    def test_inconsistent_flags(self):
        with pytest.raises(InvalidSpecError):
            make_spec("PDCVRP", B=True)
        with pytest.raises(InvalidSpecError):
            build_lambda(make_spec("CVRP").__class__(name="x", PC=True, C=True))


class TestSampling:
    def test_cvrp_demands(self):
        lo, hi = np.inf, -np.inf
        for seed in range(SAMPLES):
            d = sample_attributes(make_spec("CVRP"), 20, seed)["demand"]
            assert d[0] == 0.0
            q = d[1:] * 50
            assert np.allclose(q, np.round(q), rtol=0, atol=1e-12)
            lo, hi = min(lo, round(q.min())), max(hi, round(q.max()))
        assert (lo, hi) == (1, 9)

    def test_backhaul_count(self):
        for seed in range(SAMPLES):
            d = sample_attributes(make_spec("CVRPB"), 23, seed)["demand"]
            assert int(np.sum(d < 0)) == math.floor(0.2 * 23)

    def test_prize_and_penalty_supports(self):
        n = 20
        for seed in range(SAMPLES):
            a = sample_attributes(make_spec("PCTSP"), n, seed)
            assert a["prize"][0] == 0 and a["penalty"][0] == 0
            assert np.all((a["prize"][1:] >= 0) & (a["prize"][1:] < 4 / n))
            assert np.all((a["penalty"][1:] >= 0) & (a["penalty"][1:] < 12 / n))

    def test_op_depot(self):
        a = sample_attributes(make_spec("OP"), 10, 1)
        assert a["prize"][0] == 0 and not a["penalty"].any() and a["prize"][1:].all()

    def test_time_windows(self):
        spec = make_spec("CVRPTW")
        _, dist = gen_euclidean(21, 0)
        for seed in range(SAMPLES):
            a = sample_attributes(spec, 20, seed, d=dist.d)
            e, l, s = a["tw_early"], a["tw_late"], a["service"]
            assert (e[0], l[0], s[0]) == (0.0, 3.0, 0.0)
            assert np.all(e <= l) and np.all(e >= 0) and np.all(l <= 3.0)
            # the direct round trip is feasible
            assert np.all(np.maximum(dist.d[0, 1:], e[1:]) + 0.2 + dist.d[1:, 0] <= 3.0 + 1e-12)
            assert np.all(s[1:] == 0.2)

    def test_pd_pairs(self):
        a = sample_attributes(make_spec("PDCVRP"), 6, 0)
        assert a["pd_pairs"] == ((1, 4), (2, 5), (3, 6))
        for p, q in a["pd_pairs"]:
            assert a["demand"][p] == -a["demand"][q] < 0

    def test_pd_odd(self):
        with pytest.raises(InvalidSizeError):
            sample_attributes(make_spec("PDTSP"), 5, 0)

    def test_tw_needs_matrix(self):
        with pytest.raises(InvalidInputError):
            sample_attributes(make_spec("CVRPTW"), 5, 0)

    @given(st.sampled_from(catalog_names()), st.integers(0, 2**32))
    def test_generated_instances_consistent(self, name, seed):
        spec = make_spec(name)
        inst = generate_instance(spec, 8, seed)
        assert inst.dist.violations() == []
        assert inst.depots == tuple(range(spec.n_depots))
        if spec.C:
            assert np.all(np.abs(inst.demand) <= 1)

    def test_deterministic(self):
        a = generate_instance(make_spec("ACVRPBTW"), 10, 5)
        b = generate_instance(make_spec("ACVRPBTW"), 10, 5)
        assert dumps_instance(a) == dumps_instance(b)

    def test_json_round_trip(self):
        inst = generate_instance(make_spec("MDOCVRPBLTW"), 9, 2)
        back = loads_instance(dumps_instance(inst))
        assert back.spec == inst.spec and back.depots == inst.depots
        np.testing.assert_allclose(back.tw_late, inst.tw_late, atol=1e-11)
        np.testing.assert_allclose(back.d, inst.d, atol=1e-11)


class TestUdr:
    def test_tsp_row(self):
        inst = generate_instance(make_spec("TSP"), 10, 0)
        u = build_udr(inst, bfr_embed(inst.dist, PivotSet((0, 1, 2, 3, 4, 5, 6, 7))))
        assert u.shape == (10, 29)
        assert not u[:, 16:].any() and u[:, :16].any()

    def test_cvrp_depot(self):
        inst = generate_instance(make_spec("CVRP"), 10, 0)
        u = build_udr(inst, bfr_embed(inst.dist, PivotSet((0,))))
        omega, xi = u[0, 2:8], u[0, 8:]
        assert omega[0] == 0.0
        assert xi[0] == 1.0 and xi[5] == 1.0

    @pytest.mark.parametrize("name", catalog_names())
    def test_width_constant(self, name):
        inst = generate_instance(make_spec(name), 6, 1)
        u = build_udr(inst, bfr_embed(inst.dist, PivotSet((0, 1, 2))))
        assert u.shape[1] == 2 * 3 + 13
        lam = dict(zip(LAMBDA_FIELDS, build_lambda(inst.spec)))
        omega = u[:, 6:12]
        assert omega[:, 0].any() == bool(lam["demand"])
        if not lam["time"]:
            assert not omega[:, 3:].any()
        if not lam["prize"]:
            assert not omega[:, 1].any()

    def test_mismatch(self):
        inst = generate_instance(make_spec("TSP"), 5, 0)
        with pytest.raises(InvalidInputError):
            build_udr(inst, np.zeros((4, 2)))
