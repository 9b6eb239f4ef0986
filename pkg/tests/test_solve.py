import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import CLOSURE_3, make_instance
from quasiroute.env import route_cost, validate_solution
from quasiroute.errors import DomainError, InvalidSizeError
from quasiroute.policy import Policy, get_preset
from quasiroute.quasimetric import euclidean_matrix, gen_asymmetric
from quasiroute.solve import (
    brute_force, default_views, gap, greedy_decode, nearest_neighbor, objective_gap, solve_baseline,
)
from quasiroute.variants import catalog_names, generate_instance, make_spec

DESK = get_preset("desk")


def atsp_oracle(d):
    """Independent optimum: every permutation of nodes 1..n-1 after node 0."""
    n = len(d)
    best = np.inf
    for perm in itertools.permutations(range(1, n)):
        tour = (0,) + perm + (0,)
        best = min(best, sum(d[a][b] for a, b in zip(tour, tour[1:])))
    return best


class TestGap:
    def test_examples(self):
        assert gap(3.0, 3.0) == 0.0
        assert gap(1.1 * 2.0, 2.0) == pytest.approx(10.0)
        assert gap(0.9948, 1.0) == pytest.approx(-0.52)

    def test_bad_reference(self):
        with pytest.raises(DomainError):
            gap(1.0, 0.0)

    def test_orienteering(self):
        inst = generate_instance(make_spec("OP"), 5, 0)
        assert objective_gap(inst, -0.9, -1.0) == pytest.approx(10.0)


class TestNearestNeighbor:
    def test_collinear(self):
        d = euclidean_matrix(np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0]]))
        assert nearest_neighbor(make_instance("TSP", d), 0) == [0, 2, 1]

    def test_closure_example(self):
        inst = make_instance("ATSP", CLOSURE_3)
        pi = nearest_neighbor(inst, 0)
        assert pi == [0, 2, 1] and route_cost(inst, pi) == 13.0

    @pytest.mark.parametrize("name", catalog_names())
    def test_feasible(self, name):
        inst = generate_instance(make_spec(name), 10, 3)
        assert validate_solution(inst, nearest_neighbor(inst)) == []


class TestBruteForce:
    def test_triangle(self):
        pts = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
        _, c = brute_force(make_instance("TSP", euclidean_matrix(pts)))
        assert c == pytest.approx(12.0)

    @settings(max_examples=25)
    @given(st.integers(3, 7), st.integers(0, 2**32))
    def test_matches_permutation_oracle(self, n, seed):
        d = gen_asymmetric(n, seed).d
        pi, c = brute_force(make_instance("ATSP", d))
        assert c == pytest.approx(atsp_oracle(d), abs=1e-12)
        assert route_cost(make_instance("ATSP", d), pi) == pytest.approx(c, abs=1e-12)

    def test_four_node_fixed(self):
        d = gen_asymmetric(4, 123).d
        assert brute_force(make_instance("ATSP", d))[1] == pytest.approx(atsp_oracle(d), abs=1e-12)

    @pytest.mark.parametrize("name", ["CVRP", "ACVRPBTW", "OP", "PCTSP", "PDCVRP", "MDOCVRPBPL"])
    def test_beats_nearest_neighbor(self, name):
        for seed in range(3):
            inst = generate_instance(make_spec(name), 6, seed)
            pi, c = brute_force(inst)
            assert validate_solution(inst, pi) == []
            assert c <= route_cost(inst, nearest_neighbor(inst)) + 1e-12

    def test_size_guard(self):
        with pytest.raises(InvalidSizeError):
            brute_force(generate_instance(make_spec("TSP"), 11, 0))
        with pytest.raises(InvalidSizeError):
            brute_force(generate_instance(make_spec("CVRP"), 11, 0))

    def test_baseline_switch(self):
        assert solve_baseline(generate_instance(make_spec("TSP"), 6, 0))[2] == "brute_force"
        assert solve_baseline(generate_instance(make_spec("TSP"), 12, 0))[2] == "nearest_neighbor"


class TestGreedy:
    def test_views_monotone(self):
        pol = Policy(DESK, seed=0)
        inst = generate_instance(make_spec("ACVRP"), 10, 2)
        views = default_views(inst, 6, seed=1)
        best = [greedy_decode(inst, pol, views[:k]).best_cost for k in range(1, 7)]
        assert all(b <= a for a, b in zip(best, best[1:]))
        rep = greedy_decode(inst, pol, views)
        assert rep.best_cost == min(rep.view_costs) <= rep.view_costs[0]

    def test_default_views(self):
        inst = generate_instance(make_spec("MDCVRP"), 6, 0)
        views = default_views(inst, 4)
        assert views[0] == [0, 1, 2] and all(v[:3] == [0, 1, 2] for v in views)
        tsp = default_views(generate_instance(make_spec("TSP"), 6, 0), 3)
        assert tsp[0] == [0] and all(v[0] == 0 for v in tsp)

    def test_deterministic_report(self):
        pol = Policy(DESK, seed=0)
        inst = generate_instance(make_spec("OCVRPTW"), 8, 0)
        a = greedy_decode(inst, pol, default_views(inst, 3), ref_cost=1.0).to_json()
        b = greedy_decode(inst, pol, default_views(inst, 3), ref_cost=1.0).to_json()
        a.pop("wall_time"), b.pop("wall_time")
        assert a == b

    @pytest.mark.parametrize("name", catalog_names())
    def test_feasible_n20(self, name):
        inst = generate_instance(make_spec(name), 20, 7)
        rep = greedy_decode(inst, Policy(DESK, seed=0), default_views(inst, 2))
        assert rep.violations == [] and validate_solution(inst, rep.best_pi) == []
