"""Vectorized counterpart of the scalar environment.

Runs B trajectories in lock-step over a stack of instances that share one
ProblemSpec and node count.  The rules mirror ``env.blocked_reason`` exactly;
the test suite cross-checks both on random rollouts over the whole catalog.
Finished trajectories keep a single feasible no-op action (their current
node) so batched softmax rows stay well defined.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .env import FEAS_TOL, LARGE, static_info
from .errors import EnvInvariantError, InvalidInputError, MaskedActionError
from .variants import Instance


class BatchEnv:
    def __init__(self, instances: Sequence[Instance], inst_index: Optional[Sequence[int]] = None,
                 starts: Optional[Sequence[int]] = None):
        if not instances:
            raise InvalidInputError("need at least one instance")
        spec = instances[0].spec
        N = instances[0].n_nodes
        for inst in instances:
            if inst.spec != spec or inst.n_nodes != N:
                raise InvalidInputError("batched instances must share spec and size")
        self.instances = list(instances)
        self.spec = spec
        self.N = N
        info = static_info(instances[0])
        self.is_depot = info.is_depot
        self.depots = np.asarray(info.depots, dtype=np.int64)
        self.is_pickup = info.is_pickup
        self.pickup_of = info.pickup_of
        self.has_pickup = self.pickup_of >= 0
        self.e0, self.l0 = spec.tw_horizon

        self.D = np.stack([i.d for i in instances])
        self.demand = np.stack([i.demand for i in instances])
        self.prize = np.stack([i.prize for i in instances])
        self.penalty = np.stack([i.penalty for i in instances])
        self.early = np.stack([i.tw_early for i in instances])
        self.late = np.stack([i.tw_late for i in instances])
        self.service = np.stack([i.service for i in instances])
        self.threshold = np.array([i.pc_threshold for i in instances])
        cap_mode = spec.C and not spec.PD
        self.linehaul = (self.demand > 0) & ~self.is_depot if cap_mode else np.zeros_like(self.demand, dtype=bool)

        idx = np.arange(len(instances)) if inst_index is None else np.asarray(inst_index, dtype=np.int64)
        self.inst = idx
        B = len(idx)
        self.B = B
        if starts is None:
            starts = np.full(B, self.depots[0] if len(self.depots) else 0)
        starts = np.asarray(starts, dtype=np.int64)
        if spec.has_depot and not np.all(self.is_depot[starts]):
            raise InvalidInputError("depot variants start at a depot")
        self.rows = np.arange(B)
        self.current = starts.copy()
        self.first = starts.copy()
        self.visited = np.zeros((B, N), dtype=bool)
        self.visited[self.rows, starts] = True
        self.origin = starts.copy()
        self.peak = np.zeros(B)
        self.bh = np.zeros(B)
        self.onboard = np.zeros(B)
        self.open = np.zeros((B, N), dtype=bool)
        self.clock = np.full(B, self.e0 if spec.TW else 0.0)
        self.used = np.zeros(B)
        self.prize_got = np.zeros(B)
        self.route_count = np.zeros(B, dtype=np.int64)
        self.route_bh = np.zeros(B, dtype=bool)
        self.last_switch = np.zeros(B, dtype=bool)
        self.length = np.zeros(B)
        self.lines_left = self.linehaul[self.inst].sum(axis=1)
        self.done = np.zeros(B, dtype=bool)
        if spec.is_tsp:
            self.done = self.visited.all(axis=1)
        self.t = 0
        self.actions = [starts.copy()]

    # -- derived views -------------------------------------------------
    @property
    def remaining_load(self) -> np.ndarray:
        if self.spec.PD:
            return 1.0 - self.onboard
        return 1.0 - self.peak

    @property
    def at_depot(self) -> np.ndarray:
        return self.is_depot[self.current]

    def customers_left(self) -> np.ndarray:
        return ~np.all(self.visited | self.is_depot, axis=1)

    def problem_state(self) -> np.ndarray:
        """Scalar context C_t per trajectory."""
        spec = self.spec
        if spec.C:
            return self.remaining_load
        if spec.orienteering:
            return (spec.op_max_length - self.used) / spec.op_max_length
        if spec.PC:
            return np.maximum(self.threshold[self.inst] - self.prize_got, 0.0)
        return np.zeros(self.B)

    def dist_rows(self, nodes: Optional[np.ndarray] = None) -> np.ndarray:
        nodes = self.current if nodes is None else nodes
        return self.D[self.inst, nodes]

    # -- masks -----------------------------------------------------------
    def feasible(self, current: Optional[np.ndarray] = None, origin: Optional[np.ndarray] = None,
                 last_switch: Optional[np.ndarray] = None) -> np.ndarray:
        """Boolean (B, N) feasibility. Optional overrides evaluate re-rooted states (lookahead)."""
        spec = self.spec
        cur = self.current if current is None else current
        org = self.origin if origin is None else origin
        lsw = self.last_switch if last_switch is None else last_switch
        I = self.inst
        d_row = self.D[I, cur]                        # (B, N)
        ok = ~self.visited & ~self.is_depot
        dem = self.demand[I]
        if spec.C and not spec.PD:
            ok &= ~((dem > 0) & (self.peak[:, None] + dem > 1.0 + FEAS_TOL))
            ok &= ~((dem < 0) & (self.bh[:, None] - dem > 1.0 + FEAS_TOL))
        if spec.PD:
            partner_open = np.zeros_like(ok)
            has = self.has_pickup
            partner_open[:, has] = self.open[:, self.pickup_of[has]]
            ok &= ~has | partner_open
            if spec.C:
                ok &= ~(self.is_pickup & (self.onboard[:, None] - dem > 1.0 + FEAS_TOL))
        if spec.backhaul:
            first = (self.route_count == 0) & (self.lines_left > 0)
            ok &= ~((dem < 0) & first[:, None])
            if spec.BP:
                ok &= ~((dem > 0) & self.route_bh[:, None])
        back = None
        if spec.TW or spec.L or spec.orienteering:
            back = self.D[I, :, org] if len(self.depots) else None   # d(j, origin)
        if spec.TW:
            start = np.maximum(self.clock[:, None] + d_row, self.early[I])
            ok &= start <= self.late[I] + FEAS_TOL
            if not spec.O:
                ok &= start + self.service[I] + back <= self.l0 + FEAS_TOL
        if spec.L:
            used = self.used[:, None] + d_row + (0.0 if spec.O else back)
            ok &= used <= spec.duration_limit + FEAS_TOL
        if spec.orienteering:
            ok &= self.used[:, None] + d_row + back <= spec.op_max_length + FEAS_TOL

        if spec.has_depot:
            ok[:, self.is_depot] = self._depot_ok(cur, org, lsw)
        ok[self.done] = False
        ok[self.rows[self.done], self.current[self.done]] = True
        return ok

    def _depot_ok(self, cur, org, lsw) -> np.ndarray:
        spec = self.spec
        at_depot = self.is_depot[cur]
        left = self.customers_left()
        open_any = self.open.any(axis=1)
        nd = len(self.depots)
        out = np.zeros((self.B, nd), dtype=bool)
        if not spec.multi_route:
            allow = ~at_depot
            if spec.PD:
                allow &= ~open_any
            if spec.PC:
                allow &= ~left | (self.prize_got >= self.threshold[self.inst] - FEAS_TOL)
            elif not spec.orienteering:
                allow &= ~left
            out[:] = allow[:, None]
            return out
        dep = self.depots[None, :]
        if spec.MD:
            switch = at_depot[:, None] & (dep != cur[:, None]) & ~lsw[:, None]
            ret = ~at_depot[:, None] & (dep == org[:, None])
            out = switch | ret
        else:
            out[:] = ~at_depot[:, None]
        if spec.PD:
            out &= ~open_any[:, None]
        return out

    def mask(self) -> np.ndarray:
        ok = self.feasible()
        if not np.all(ok.any(axis=1)):
            bad = int(np.flatnonzero(~ok.any(axis=1))[0])
            raise EnvInvariantError(f"dead end in trajectory {bad} at t={self.t}")
        return np.where(ok, 0.0, -LARGE)

    # -- transitions -------------------------------------------------------
    def step(self, action: np.ndarray, check: bool = True) -> None:
        action = np.asarray(action, dtype=np.int64)
        spec = self.spec
        if check:
            ok = self.feasible()
            if not np.all(ok[self.rows, action]):
                bad = int(np.flatnonzero(~ok[self.rows, action])[0])
                raise MaskedActionError(f"trajectory {bad}: action {action[bad]} is masked at t={self.t}")
        live = ~self.done
        rows = self.rows
        I = self.inst
        cur = self.current
        leg = self.D[I, cur, action]
        to_depot = self.is_depot[action] & live
        from_depot = self.is_depot[cur]
        switch = to_depot & from_depot
        ret = to_depot & ~from_depot
        cust = live & ~self.is_depot[action]

        # route close
        self.length += np.where(ret & (not spec.O), leg, 0.0)
        self.origin = np.where(switch, action, self.origin)
        for arr in (self.peak, self.bh, self.onboard, self.used):
            arr[ret] = 0.0
        self.clock[ret] = self.e0 if spec.TW else 0.0
        self.route_count[ret] = 0
        self.route_bh[ret] = False
        self.last_switch = np.where(live, switch, self.last_switch)

        # customer visit
        dem = self.demand[I, action]
        self.length += np.where(cust, leg, 0.0)
        self.used += np.where(cust, leg, 0.0)
        arrive = self.clock + leg
        if spec.TW:
            arrive = np.maximum(arrive, self.early[I, action]) + self.service[I, action]
        self.clock = np.where(cust, arrive, self.clock)
        self.route_count += cust
        self.prize_got += np.where(cust, self.prize[I, action], 0.0)
        if spec.C and not spec.PD:
            line = cust & (dem > 0)
            back = cust & (dem < 0)
            self.peak += np.where(line, dem, 0.0)
            self.lines_left -= line
            self.bh -= np.where(back, dem, 0.0)
            self.peak = np.where(back, np.maximum(self.peak, self.bh), self.peak)
            self.route_bh |= back
        if spec.PD:
            pick = cust & self.is_pickup[action]
            drop = cust & self.has_pickup[action]
            self.open[rows[pick], action[pick]] = True
            self.open[rows[drop], self.pickup_of[action[drop]]] = False
            if spec.C:
                self.onboard -= np.where(cust, dem, 0.0)

        self.visited[rows[live], action[live]] = True
        self.current = np.where(live, action, self.current)
        if spec.is_tsp:
            finish = live & self.visited.all(axis=1)
            self.length += np.where(finish, self.D[I, self.current, self.first], 0.0)
            self.done |= finish
        elif spec.multi_route:
            self.done |= ret & ~self.customers_left()
        else:
            self.done |= ret
        self.t += 1
        self.actions.append(np.where(live, action, -1))

    def objective(self) -> np.ndarray:
        spec = self.spec
        if spec.orienteering:
            return -self.prize_got
        cost = self.length.copy()
        if spec.PC:
            skipped = ~self.visited & ~self.is_depot
            cost += (self.penalty[self.inst] * skipped).sum(axis=1)
        return cost

    def sequences(self) -> list[list[int]]:
        acts = np.stack(self.actions, axis=1)
        return [[int(a) for a in row if a >= 0] for row in acts]


def random_rollouts(inst: Instance, n: int, seed) -> BatchEnv:
    """Uniformly random feasible rollouts, mostly a fuzzing tool."""
    rng = np.random.default_rng(seed)
    env = BatchEnv([inst], inst_index=np.zeros(n, dtype=np.int64))
    limit = 4 * inst.n_nodes + 8
    while not env.done.all():
        if env.t > limit:
            raise EnvInvariantError("batched rollout did not terminate")
        ok = env.feasible()
        if not np.all(ok.any(axis=1)):
            raise EnvInvariantError(f"dead end at t={env.t}")
        u = rng.random(ok.shape) * ok
        env.step(np.argmax(u, axis=1))
    return env
