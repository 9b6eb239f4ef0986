"""Inference with pivot-seeded multi-view augmentation, classical baselines,
an exact enumeration oracle and the gap metric."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .env import blocked_reason, reset, route_cost, static_info, step, terminal_objective, validate_solution
from .errors import DomainError, InvalidSizeError
from .learn import rollout_multistart
from .pivots import multiview_pivot_seeds
from .policy import Policy
from .variants import Instance

BRUTE_FORCE_MAX = 10


@dataclass
class SolveReport:
    best_pi: list
    best_cost: float
    view_costs: list
    ref_cost: Optional[float] = None
    gap_percent: Optional[float] = None
    wall_time: float = 0.0
    violations: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "pi": [int(v) for v in self.best_pi], "cost": self.best_cost,
            "view_costs": [float(c) for c in self.view_costs], "ref_cost": self.ref_cost,
            "gap_percent": self.gap_percent, "wall_time": self.wall_time,
            "violations": list(self.violations),
        }


def gap(cost: float, ref: float) -> float:
    """Percentage excess of ``cost`` over ``ref``; negative when ``cost`` beats it."""
    if ref <= 0:
        raise DomainError(f"reference cost must be positive, got {ref}")
    return (cost - ref) / ref * 100.0


def objective_gap(inst: Instance, cost: float, ref: float) -> float:
    """Gap on the natural scale: orienteering objectives are negated prizes, so
    the gap is measured on collected prize (shortfall is positive)."""
    if inst.spec.orienteering:
        prize, ref_prize = -cost, -ref
        if ref_prize <= 0:
            raise DomainError(f"reference prize must be positive, got {ref_prize}")
        return (ref_prize - prize) / ref_prize * 100.0
    return gap(cost, ref)


def default_views(inst: Instance, n_views: int, seed=0) -> list[list[int]]:
    """View 0 uses the depot set alone (node 0 for the TSP family); the rest
    follow the customer-traversal / dual-customer seeding rule."""
    base = list(inst.depots) or [0]
    views = [base]
    if n_views > 1:
        depots = list(inst.depots)
        extra = multiview_pivot_seeds(inst.n_nodes, depots, n_views - 1, seed)
        if not depots:
            extra = [[0] + [v for v in s if v != 0] for s in extra]
        views += extra
    return views


def greedy_decode(inst: Instance, policy: Policy, views: Optional[Sequence[Sequence[int]]] = None,
                  ref_cost: Optional[float] = None, lookahead: bool = True) -> SolveReport:
    """Argmax-decode once per pivot view and keep the cheapest solution."""
    t0 = time.perf_counter()
    views = [list(v) for v in (views or default_views(inst, 1))]
    batch = rollout_multistart(policy, [inst] * len(views), mode="greedy", seeds=views,
                               lookahead=lookahead, track_grad=False, force_first=False)
    costs = batch.costs[:, 0]
    k = int(np.argmin(costs))
    pi = batch.sequences[k]
    best = float(costs[k])
    rep = SolveReport(best_pi=pi, best_cost=best, view_costs=[float(c) for c in costs],
                      ref_cost=ref_cost, violations=validate_solution(inst, pi))
    if ref_cost is not None:
        rep.gap_percent = objective_gap(inst, best, ref_cost)
    rep.wall_time = time.perf_counter() - t0
    return rep


def nearest_neighbor(inst: Instance, start: Optional[int] = None) -> list[int]:
    """Move to the closest feasible node by outgoing distance; customers are
    preferred over depots and ties go to the lowest index."""
    info = static_info(inst)
    d = inst.d
    state = reset(inst, start)
    while not state.done:
        ok = np.array([blocked_reason(state, inst, j) is None for j in range(inst.n_nodes)])
        cust = ok & ~info.is_depot
        pool = cust if cust.any() else ok
        cand = np.flatnonzero(pool)
        j = int(cand[np.argmin(d[state.current, cand])])
        state = step(state, inst, j)
    return list(state.pi)


def brute_force(inst: Instance) -> tuple[list[int], float]:
    """Exact optimum by depth-first enumeration of mask-feasible sequences
    with branch-and-bound.  The TSP family fixes node 0 as the start."""
    if inst.n_customers > BRUTE_FORCE_MAX:
        raise InvalidSizeError(f"brute force limited to {BRUTE_FORCE_MAX} customers")
    spec = inst.spec
    info = static_info(inst)
    d = inst.d
    n = inst.n_nodes
    off = d + np.diag(np.full(n, np.inf))
    min_in = off.min(axis=0)
    min_in[~np.isfinite(min_in)] = 0.0
    required = ~info.is_depot if not (spec.PC or spec.orienteering) else np.zeros(n, dtype=bool)
    total_prize = float(inst.prize.sum())
    best = {"cost": np.inf, "pi": None}

    def bound(state) -> float:
        if spec.orienteering:
            left = total_prize - float(inst.prize[state.visited].sum())
            return -(state.collected_prize + left)
        need = required & ~state.visited
        return state.length + float(min_in[need].sum())

    def dfs(state):
        if state.done:
            c = terminal_objective(state, inst)
            if c < best["cost"] - 1e-12:
                best["cost"], best["pi"] = c, list(state.pi)
            return
        if bound(state) >= best["cost"] - 1e-12:
            return
        # nearest-first ordering finds good incumbents early
        for j in np.argsort(d[state.current], kind="stable"):
            if blocked_reason(state, inst, int(j)) is None:
                dfs(step(state, inst, int(j), check=False))

    dfs(reset(inst, None))
    return best["pi"], float(best["cost"])


def solve_baseline(inst: Instance) -> tuple[list[int], float, str]:
    """Reference solution: exact for small instances, nearest neighbor beyond."""
    if inst.n_customers <= 8:
        pi, c = brute_force(inst)
        return pi, c, "brute_force"
    pi = nearest_neighbor(inst)
    return pi, route_cost(inst, pi), "nearest_neighbor"
