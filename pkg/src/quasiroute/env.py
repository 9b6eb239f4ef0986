"""Constructive routing environment: scalar reference states, feasibility
masks, transitions, objective evaluation and solution validation.

Sequences (``pi``) list every visited node in order, starting with the start
node.  For depot variants every route segment ends with a depot action, so a
finished multi-route solution looks like ``[0, 3, 5, 0, 2, 0]``.  A depot
action taken while already at a depot is a zero-cost fleet switch (multi-depot
only).  For the TSP family ``pi`` is a permutation and the closing leg back to
``pi[0]`` is implicit.

Capacity bookkeeping uses the exact load profile of a route: ``peak`` is the
largest load carried so far (the departure load grows with every linehaul
added), ``backhaul_load`` the load collected on the way back.  A linehaul
``q`` fits iff ``peak + q <= 1``; a backhaul ``q`` fits iff
``backhaul_load + q <= 1``.
"""

from __future__ import annotations

import json
import weakref
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EnvInvariantError, InvalidInputError, MaskedActionError
from .variants import Instance

LARGE = 1e9
FEAS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class _Static:
    n_nodes: int
    depots: tuple
    is_depot: np.ndarray
    is_pickup: np.ndarray
    pickup_of: np.ndarray
    partner: np.ndarray      # delivery of each pickup, -1 elsewhere
    linehaul: np.ndarray     # positive-demand customers (non-PD capacity variants)
    backhaul: np.ndarray
    n_linehaul: int
    horizon_end: float
    horizon_start: float


_STATIC_CACHE: "weakref.WeakKeyDictionary[Instance, _Static]" = weakref.WeakKeyDictionary()


def static_info(inst: Instance) -> _Static:
    cached = _STATIC_CACHE.get(inst)
    if cached is not None:
        return cached
    spec = inst.spec
    n = inst.n_nodes
    is_depot = inst.is_depot
    pickup_of = inst.pickup_of
    partner = np.full(n, -1, dtype=np.int64)
    for p, q in inst.pd_pairs:
        partner[p] = q
    cap_mode = spec.C and not spec.PD
    linehaul = (inst.demand > 0) & ~is_depot if cap_mode else np.zeros(n, dtype=bool)
    backhaul = (inst.demand < 0) & ~is_depot if cap_mode else np.zeros(n, dtype=bool)
    e0, l0 = spec.tw_horizon
    info = _Static(
        n_nodes=n, depots=tuple(inst.depots), is_depot=is_depot, is_pickup=inst.is_pickup,
        pickup_of=pickup_of, partner=partner, linehaul=linehaul, backhaul=backhaul,
        n_linehaul=int(linehaul.sum()), horizon_end=l0, horizon_start=e0,
    )
    _STATIC_CACHE[inst] = info
    return info


@dataclass(frozen=True, eq=False)
class RolloutState:
    t: int
    current: int
    first: int
    visited: np.ndarray
    remaining_load: float
    clock: float
    route_used: float
    collected_prize: float
    origin_depot: Optional[int]
    open_pickups: frozenset
    done: bool
    peak: float = 0.0
    backhaul_load: float = 0.0
    onboard: float = 0.0
    route_customers: int = 0
    route_has_backhaul: bool = False
    last_switch: bool = False
    length: float = 0.0
    linehauls_left: int = 0
    pi: tuple = ()

    @property
    def at_depot(self) -> bool:
        return self.origin_depot is not None and self.current == self.origin_depot


def _customers_left(state: RolloutState, info: _Static) -> bool:
    return not bool(np.all(state.visited | info.is_depot))


def reset(inst: Instance, start: Optional[int] = None) -> RolloutState:
    spec = inst.spec
    info = static_info(inst)
    n = inst.n_nodes
    if start is None:
        start = info.depots[0] if info.depots else 0
    start = int(start)
    if not 0 <= start < n:
        raise InvalidInputError(f"start node {start} out of range")
    if spec.has_depot and not info.is_depot[start]:
        raise InvalidInputError(f"start node {start} is not a depot")
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    return RolloutState(
        done=bool(spec.is_tsp and visited.all()),
        t=0, current=start, first=start, visited=visited, remaining_load=1.0,
        clock=info.horizon_start if spec.TW else 0.0, route_used=0.0, collected_prize=0.0,
        origin_depot=start if spec.has_depot else None, open_pickups=frozenset(),
        linehauls_left=info.n_linehaul, pi=(start,),
    )


def blocked_reason(state: RolloutState, inst: Instance, j: int) -> Optional[str]:
    """Why node ``j`` is infeasible in ``state`` (None when it is feasible)."""
    spec = inst.spec
    info = static_info(inst)
    d = inst.d
    cur = state.current
    if state.done:
        return "done"
    if info.is_depot[j]:
        return _depot_reason(state, inst, info, j)
    if state.visited[j]:
        return "visited"
    leg = d[cur, j]
    dem = inst.demand[j]
    origin = state.origin_depot
    if spec.C and not spec.PD:
        if dem > 0 and state.peak + dem > 1.0 + FEAS_TOL:
            return "capacity"
        if dem < 0 and state.backhaul_load - dem > 1.0 + FEAS_TOL:
            return "capacity"
    if spec.PD:
        p = info.pickup_of[j]
        if p >= 0 and p not in state.open_pickups:
            return "precedence"
        if spec.C and info.is_pickup[j] and state.onboard - dem > 1.0 + FEAS_TOL:
            return "capacity"
    if spec.backhaul:
        if dem < 0 and state.route_customers == 0 and state.linehauls_left > 0:
            return "backhaul_first"
        if dem > 0 and spec.BP and state.route_has_backhaul:
            return "backhaul_priority"
    if spec.TW:
        start = max(state.clock + leg, inst.tw_early[j])
        if start > inst.tw_late[j] + FEAS_TOL:
            return "time_window"
        if not spec.O and start + inst.service[j] + d[j, origin] > info.horizon_end + FEAS_TOL:
            return "time_window"
    if spec.L:
        used = state.route_used + leg + (0.0 if spec.O else d[j, origin])
        if used > spec.duration_limit + FEAS_TOL:
            return "duration"
    if spec.orienteering:
        if state.route_used + leg + d[j, origin] > spec.op_max_length + FEAS_TOL:
            return "length"
    return None


def _depot_reason(state: RolloutState, inst: Instance, info: _Static, j: int) -> Optional[str]:
    spec = inst.spec
    at_depot = bool(info.is_depot[state.current])
    left = _customers_left(state, info)
    if not spec.multi_route:
        if at_depot:
            return "empty_route"
        if spec.PD and state.open_pickups:
            return "open_pickups"
        if spec.PC and left and state.collected_prize < inst.pc_threshold - FEAS_TOL:
            return "min_prize"
        if left and not (spec.PC or spec.orienteering):
            return "unserved"
        return None
    if at_depot:
        if not spec.MD or j == state.current:
            return "empty_route"
        if state.last_switch:
            return "double_switch"
        return None
    if spec.MD and j != state.origin_depot:
        return "origin_depot"
    if spec.PD and state.open_pickups:
        return "open_pickups"
    return None


def feasible(state: RolloutState, inst: Instance) -> np.ndarray:
    return np.array([blocked_reason(state, inst, j) is None for j in range(inst.n_nodes)])


def feasible_mask(state: RolloutState, inst: Instance) -> np.ndarray:
    """Additive logit offsets: 0 for feasible nodes, -LARGE otherwise."""
    if state.done:
        raise InvalidInputError("state is terminal")
    ok = feasible(state, inst)
    if not ok.any():
        raise EnvInvariantError(f"no feasible action at t={state.t}, pi={list(state.pi)}")
    return np.where(ok, 0.0, -LARGE)


def mask_reasons(state: RolloutState, inst: Instance) -> dict[int, str]:
    return {j: r for j in range(inst.n_nodes) if (r := blocked_reason(state, inst, j)) is not None}


def step(state: RolloutState, inst: Instance, action: int, check: bool = True) -> RolloutState:
    """Apply ``action`` and return the successor state (``state`` is left untouched)."""
    action = int(action)
    if check:
        reason = blocked_reason(state, inst, action)
        if reason is not None:
            raise MaskedActionError(f"action {action} is masked ({reason}) at t={state.t}")
    spec = inst.spec
    info = static_info(inst)
    d = inst.d
    cur = state.current
    visited = state.visited.copy()
    visited[action] = True
    upd = dict(t=state.t + 1, current=action, visited=visited, pi=state.pi + (action,))

    if info.is_depot[action]:
        if info.is_depot[cur]:
            upd.update(origin_depot=action, last_switch=True)
        else:
            leg = 0.0 if spec.O else float(d[cur, action])
            upd.update(
                length=state.length + leg, route_used=0.0, peak=0.0, backhaul_load=0.0,
                onboard=0.0, remaining_load=1.0, route_customers=0, route_has_backhaul=False,
                clock=info.horizon_start if spec.TW else 0.0, last_switch=False,
            )
            left = not bool(np.all(visited | info.is_depot))
            upd["done"] = (not spec.multi_route) or not left
        return replace(state, **upd)

    leg = float(d[cur, action])
    dem = float(inst.demand[action])
    clock = state.clock + leg
    if spec.TW:
        clock = max(clock, float(inst.tw_early[action])) + float(inst.service[action])
    upd.update(
        length=state.length + leg, route_used=state.route_used + leg, clock=clock,
        route_customers=state.route_customers + 1, last_switch=False,
        collected_prize=state.collected_prize + float(inst.prize[action]),
    )
    if spec.C and not spec.PD:
        peak, bh = state.peak, state.backhaul_load
        if dem > 0:
            peak += dem
            upd["linehauls_left"] = state.linehauls_left - 1
        else:
            bh -= dem
            peak = max(peak, bh)
            upd["route_has_backhaul"] = True
        upd.update(peak=peak, backhaul_load=bh, remaining_load=1.0 - peak)
    if spec.PD:
        opened = set(state.open_pickups)
        onboard = state.onboard
        if info.is_pickup[action]:
            opened.add(action)
        else:
            opened.discard(int(info.pickup_of[action]))
        if spec.C:
            onboard -= dem
            upd["remaining_load"] = 1.0 - onboard
        upd.update(open_pickups=frozenset(opened), onboard=onboard)
    if spec.is_tsp and bool(np.all(visited)):
        upd.update(done=True, length=upd["length"] + float(d[action, state.first]))
    return replace(state, **upd)


def terminal_objective(state: RolloutState, inst: Instance) -> float:
    """Objective of a finished rollout (distance, plus penalties, or minus prize for OP)."""
    spec = inst.spec
    if spec.orienteering:
        return -state.collected_prize
    cost = state.length
    if spec.PC:
        skipped = ~state.visited & ~static_info(inst).is_depot
        cost += float(inst.penalty[skipped].sum())
    return cost


def route_length(inst: Instance, pi: Sequence[int]) -> float:
    spec = inst.spec
    info = static_info(inst)
    d = inst.d
    pi = [int(v) for v in pi]
    total = 0.0
    for a, b in zip(pi[:-1], pi[1:]):
        if info.is_depot[b] and info.is_depot[a]:
            continue
        if info.is_depot[b] and spec.O:
            continue
        total += float(d[a, b])
    if spec.is_tsp and len(pi) > 1:
        total += float(d[pi[-1], pi[0]])
    return total


def route_cost(inst: Instance, pi: Sequence[int]) -> float:
    """Objective value of a sequence: directed legs (open-route returns and
    depot switches are free), plus penalties of skipped customers for PC;
    OP returns the negated collected prize."""
    spec = inst.spec
    info = static_info(inst)
    seen = np.zeros(inst.n_nodes, dtype=bool)
    seen[[int(v) for v in pi]] = True
    if spec.orienteering:
        return -float(inst.prize[seen & ~info.is_depot].sum())
    cost = route_length(inst, pi)
    if spec.PC:
        cost += float(inst.penalty[~seen & ~info.is_depot].sum())
    return cost


def validate_solution(inst: Instance, pi: Sequence[int]) -> list[str]:
    """Re-simulate ``pi`` and list every violation (empty means feasible)."""
    pi = [int(v) for v in pi]
    out = []
    if not pi:
        return ["structure: empty sequence"]
    if any(v < 0 or v >= inst.n_nodes for v in pi):
        return ["structure: node index out of range"]
    try:
        state = reset(inst, pi[0])
    except InvalidInputError as exc:
        return [f"structure: {exc}"]
    for k, a in enumerate(pi[1:], start=1):
        if state.done:
            out.append(f"structure: action {a} at position {k} after the solution finished")
            break
        reason = blocked_reason(state, inst, a)
        if reason is not None:
            out.append(f"{_category(reason)}: node {a} at position {k} ({reason})")
        state = step(state, inst, a, check=False)
    if not state.done:
        missing = [v for v in inst.customers if not state.visited[v]] if inst.spec.has_depot else \
            [v for v in range(inst.n_nodes) if not state.visited[v]]
        if missing and not (inst.spec.PC or inst.spec.orienteering):
            out.append(f"coverage: customers {missing} never visited")
        else:
            out.append("structure: solution does not end at a depot")
    return out


_CATEGORIES = {
    "visited": "coverage", "unserved": "coverage", "precedence": "precedence",
    "open_pickups": "precedence", "capacity": "capacity", "time_window": "time_window",
    "duration": "duration", "length": "length", "backhaul_first": "backhaul",
    "backhaul_priority": "backhaul", "origin_depot": "depot", "double_switch": "depot",
    "empty_route": "depot", "min_prize": "prize", "done": "structure",
}


def _category(reason: str) -> str:
    return _CATEGORIES.get(reason, "other")


def audit_routes(inst: Instance, pi: Sequence[int], tol: float = FEAS_TOL) -> list[str]:
    """Route-level feasibility audit written independently of the mask rules.

    Splits ``pi`` into depot-rooted segments and checks every constraint from
    the segment's own load profile, timeline and length.
    """
    spec = inst.spec
    d = inst.d
    pi = [int(v) for v in pi]
    errs = []
    depots = set(inst.depots)
    customers = set(range(inst.n_nodes)) - depots
    visits = [v for v in pi if v in customers]
    if len(visits) != len(set(visits)):
        errs.append("customer visited twice")
    if spec.is_tsp:
        if sorted(pi) != list(range(inst.n_nodes)):
            errs.append("not a permutation")
        return errs
    if not (spec.PC or spec.orienteering) and set(visits) != customers:
        errs.append("missing customers")
    if pi[0] not in depots or pi[-1] not in depots:
        errs.append("sequence must start and end at a depot")
        return errs

    # segments: (depot, customers...) closed by the next depot action
    segments = []
    cur_depot, seg = pi[0], []
    for v in pi[1:]:
        if v in depots:
            if seg:
                segments.append((cur_depot, seg, v))
                seg = []
            cur_depot = v
        else:
            seg.append(v)
    if seg:
        errs.append("last route never closed")
    if not spec.multi_route and len(segments) != 1:
        errs.append(f"single-route variant produced {len(segments)} routes")

    unvisited_lines = {v for v in customers if inst.demand[v] > 0}
    for dep, route, end in segments:
        if spec.MD and end != dep:
            errs.append(f"route from depot {dep} returns to depot {end}")
        legs = [dep] + route
        travel = [d[a, b] for a, b in zip(legs[:-1], legs[1:])]
        closing = 0.0 if spec.O else d[route[-1], dep]
        if spec.L and sum(travel) + closing > spec.duration_limit + tol:
            errs.append(f"route {route} exceeds duration limit")
        if spec.orienteering and sum(travel) + d[route[-1], dep] > spec.op_max_length + tol:
            errs.append("orienteering route too long")
        if spec.TW:
            t = spec.tw_horizon[0]
            for (a, b), leg in zip(zip(legs[:-1], legs[1:]), travel):
                t = max(t + leg, inst.tw_early[b])
                if t > inst.tw_late[b] + tol:
                    errs.append(f"late at node {b}")
                t += inst.service[b]
            if not spec.O and t + d[route[-1], dep] > spec.tw_horizon[1] + tol:
                errs.append(f"route {route} returns after the depot closes")
        if spec.C and not spec.PD:
            dem = inst.demand
            load = sum(dem[v] for v in route if dem[v] > 0)
            peak = load
            for v in route:
                load -= dem[v]
                peak = max(peak, load)
            if peak > 1.0 + tol:
                errs.append(f"route {route} overloads the vehicle")
        if spec.backhaul:
            if inst.demand[route[0]] < 0 and unvisited_lines:
                errs.append(f"route {route} starts with a backhaul while linehauls remain")
            if spec.BP:
                seen_back = False
                for v in route:
                    if inst.demand[v] < 0:
                        seen_back = True
                    elif seen_back:
                        errs.append(f"linehaul {v} after a backhaul")
            unvisited_lines -= set(route)
        if spec.PD:
            pos = {v: k for k, v in enumerate(route)}
            onboard, worst = 0.0, 0.0
            for v in route:
                onboard -= inst.demand[v]
                worst = max(worst, onboard)
            for p, q in inst.pd_pairs:
                if (p in pos) != (q in pos):
                    errs.append(f"pair ({p}, {q}) split across routes")
                elif p in pos and pos[p] > pos[q]:
                    errs.append(f"delivery {q} before pickup {p}")
            if spec.C and worst > 1.0 + tol:
                errs.append(f"route {route} overloads the vehicle")
        if spec.PC:
            got = sum(inst.prize[v] for v in route)
            if len(set(visits)) < len(customers) and got < inst.pc_threshold - tol:
                errs.append("returned before collecting the minimum prize")
    return errs


def rollout(inst: Instance, chooser: Callable[[RolloutState, np.ndarray], int], start=None,
            max_steps: Optional[int] = None) -> RolloutState:
    """Drive the scalar env until done; ``chooser`` gets the state and the feasible boolean mask."""
    state = reset(inst, start)
    limit = max_steps or 4 * inst.n_nodes + 8
    while not state.done:
        if state.t > limit:
            raise EnvInvariantError("rollout did not terminate")
        ok = feasible(state, inst)
        if not ok.any():
            raise EnvInvariantError(f"dead end at t={state.t}, pi={list(state.pi)}")
        state = step(state, inst, chooser(state, ok))
    return state


def lookahead_choice(current: int, candidates: Sequence[int], best_prob: Sequence[float],
                     best_customer: Sequence[int]) -> int:
    """Shared tie-break rule: highest best-customer probability, current depot
    first on ties, then the lowest depot index."""
    order = sorted(range(len(candidates)), key=lambda k: (-best_prob[k], candidates[k] != current, candidates[k]))
    k = order[0]
    if best_customer[k] < 0:
        raise EnvInvariantError("no depot offers a feasible customer")
    return int(best_customer[k]) if candidates[k] == current else int(candidates[k])


def lookahead_depot_choice(state: RolloutState, inst: Instance,
                           scorer: Callable[[RolloutState, np.ndarray], np.ndarray]) -> int:
    """At a depot with customers left, pick the depot whose best customer is most likely.

    ``scorer(candidate_state, feasible)`` returns a probability vector over
    nodes for the state re-rooted at that depot.  Returns a customer when the
    current depot wins, else the winning depot (a switch action).
    """
    info = static_info(inst)
    if not info.is_depot[state.current]:
        raise InvalidInputError("lookahead applies to depot states only")
    candidates = [state.current]
    if inst.spec.MD and not state.last_switch:
        candidates += [k for k in info.depots if k != state.current]
    probs, best = [], []
    for k in candidates:
        cand = replace(state, current=k, origin_depot=k)
        ok = feasible(cand, inst) & ~info.is_depot
        if not ok.any():
            probs.append(-1.0)
            best.append(-1)
            continue
        p = np.asarray(scorer(cand, ok), dtype=np.float64)
        p = np.where(ok, p, -np.inf)
        j = int(np.argmax(p))
        probs.append(float(p[j]))
        best.append(j)
    return lookahead_choice(state.current, candidates, probs, best)


def solution_to_json(inst: Instance, pi: Sequence[int]) -> dict:
    pi = [int(v) for v in pi]
    return {"pi": pi, "cost": route_cost(inst, pi), "violations": validate_solution(inst, pi)}


def dumps_solution(inst: Instance, pi: Sequence[int]) -> str:
    return json.dumps(solution_to_json(inst, pi))
