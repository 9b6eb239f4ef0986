"""REINFORCE with a shared multi-start baseline, AdamW, and the training loop."""

from __future__ import annotations

import contextlib
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tn
from .batch_env import BatchEnv
from .env import lookahead_choice, static_info
from .errors import InvalidParameterError, TrainingDivergenceError
from .pivots import training_pivot_seeds
from .policy import Policy, decode_logits, trajectory_view
from .quasimetric import make_rng
from .tensor import Tensor
from .variants import Instance, ProblemSpec, generate_instance, make_spec

METRIC_COLUMNS = ("iter", "problem", "mean_cost", "baseline_cost", "grad_norm", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    iters_per_epoch: int = 200
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    n_starts: Optional[int] = None      # None: every feasible distinct start
    problems: tuple = ("TSP",)
    n: int = 20
    seed: int = 0
    grad_clip: Optional[float] = 10.0
    stochastic_pivots: bool = True
    scaler: float = 1e6

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidParameterError("learning rate must be positive")
        if self.batch_size < 1:
            raise InvalidParameterError("batch size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** sum(1 for e in self.decay_epochs if epoch >= e)


@dataclass(eq=False)
class RolloutBatch:
    costs: np.ndarray          # (I, S) objective per trajectory
    logp: Optional[Tensor]     # (I, S) summed log-probabilities
    sequences: list
    n_starts: int

    @property
    def reward(self) -> np.ndarray:
        return -self.costs


# -- rollouts -----------------------------------------------------------------
def start_actions(inst: Instance, n_starts: Optional[int]) -> tuple[int, list[int]]:
    """(reset node, distinct forced first actions).

    TSP-family trajectories start at distinct nodes; depot variants start at
    the depot and force distinct feasible first customers.
    """
    info = static_info(inst)
    if inst.spec.is_tsp:
        cands = list(range(inst.n_nodes))
        reset_node = -1
    else:
        env = BatchEnv([inst])
        ok = env.feasible()[0] & ~info.is_depot
        cands = [int(v) for v in np.flatnonzero(ok)]
        reset_node = info.depots[0]
    k = len(cands) if n_starts is None else n_starts
    if k > len(cands) or k < 1:
        raise InvalidParameterError(f"{k} starts requested but only {len(cands)} feasible distinct starts")
    return reset_node, cands[:k]


def _sample(probs: np.ndarray, rng) -> np.ndarray:
    u = rng.random((probs.shape[0], 1))
    cdf = np.cumsum(probs, axis=1)
    a = (cdf < u * cdf[:, -1:]).sum(axis=1)
    # never land on a zero-probability slot through rounding at the top end
    a = np.minimum(a, probs.shape[1] - 1)
    bad = probs[np.arange(len(a)), a] <= 0
    if np.any(bad):
        a[bad] = np.argmax(probs[bad], axis=1)
    return a


def greedy_actions(logits: np.ndarray, feasible: np.ndarray) -> np.ndarray:
    """Argmax over feasible nodes; ties go to the lowest index."""
    return np.argmax(np.where(feasible, logits, -np.inf), axis=1)


def rollout_multistart(policy: Policy, instances: Sequence[Instance], n_starts: Optional[int] = None,
                       mode: str = "sample", rng=None, seeds: Optional[Sequence[Sequence[int]]] = None,
                       lookahead: bool = False, track_grad: Optional[bool] = None,
                       force_first: bool = True) -> RolloutBatch:
    """Roll out ``n_starts`` trajectories per instance (all sharing one spec).

    With ``force_first=False`` a single trajectory per instance starts at the
    depot (node 0 for the TSP family) and the policy picks every action.

    ``seeds`` are pivot init seeds per instance (default: depot set, or node 0
    for the TSP family).  In greedy mode with ``lookahead`` the multi-depot
    global lookahead is applied at depot states.
    """
    if mode not in ("sample", "greedy"):
        raise InvalidParameterError(f"unknown rollout mode {mode!r}")
    rng = make_rng(0 if rng is None else rng)
    track = (mode == "sample") if track_grad is None else track_grad
    instances = list(instances)
    if seeds is None:
        seeds = [list(inst.depots) or [0] for inst in instances]
    is_tsp = instances[0].spec.is_tsp
    I = len(instances)
    if force_first:
        plans = [start_actions(inst, n_starts) for inst in instances]
        S = min(len(p[1]) for p in plans)
        forced = np.concatenate([np.asarray(p[1][:S]) for p in plans])
        starts = forced if is_tsp else np.repeat([p[0] for p in plans], S)
    else:
        S = 1
        forced = None
        starts = np.array([inst.depots[0] if inst.depots else 0 for inst in instances])
    inst_index = np.repeat(np.arange(I), S)

    ctx = tn.no_grad() if not track else contextlib.nullcontext()
    with ctx:
        enc = policy.encode(instances, seeds)
        env = BatchEnv(instances, inst_index=inst_index, starts=starts)
        if forced is not None and not is_tsp:
            env.step(forced)
        view = trajectory_view(enc, inst_index)
        cfg = policy.cfg
        steps: list[Tensor] = []
        limit = 4 * env.N + 8
        while not env.done.all():
            if env.t > limit:
                raise TrainingDivergenceError("rollout exceeded its step budget")
            ok = env.feasible()
            mask = np.where(ok, 0.0, -1e9)
            logits = decode_logits(enc, view, env.first, env.current, env.problem_state(), mask, cfg)
            if mode == "sample":
                logp_all = tn.masked_log_softmax(logits, ok)
                action = _sample(np.exp(logp_all.data), rng)
            else:
                action = greedy_actions(logits.data, ok)
                if lookahead and env.spec.MD:
                    action = _apply_lookahead(env, enc, view, logits.data, ok, action, cfg)
                logp_all = tn.masked_log_softmax(logits, ok) if track else None
            if logp_all is not None:
                live = (~env.done).astype(np.float64)
                steps.append(logp_all[np.arange(env.B), action] * live)
            env.step(action)
        costs = env.objective().reshape(I, S)
        logp = None
        if steps:
            total = steps[0]
            for s in steps[1:]:
                total = total + s
            logp = total.reshape(I, S)
    return RolloutBatch(costs=costs, logp=logp, sequences=env.sequences(), n_starts=S)


def _apply_lookahead(env: BatchEnv, enc, view, logits, ok, action, cfg) -> np.ndarray:
    """Replace depot-state greedy actions with the global lookahead choice."""
    rows = np.flatnonzero(env.at_depot & ~env.done & env.customers_left())
    if rows.size == 0:
        return action
    out = action.copy()
    depots = env.depots
    best_p = np.full((env.B, len(depots)), -1.0)
    best_c = np.full((env.B, len(depots)), -1, dtype=np.int64)
    for k, dep in enumerate(depots):
        cur = np.full(env.B, dep)
        feas = env.feasible(current=cur, origin=cur, last_switch=np.ones(env.B, dtype=bool)) & ~env.is_depot
        feas[env.done] = False
        has = feas.any(axis=1)
        safe = np.where(has[:, None], feas, True)
        mask = np.where(safe, 0.0, -1e9)
        with tn.no_grad():
            lg = decode_logits(enc, view, env.first, cur, env.problem_state(), mask, cfg).data
        p = tn.masked_softmax(lg, safe).data
        p = np.where(feas, p, -1.0)
        best_c[:, k] = np.where(has, np.argmax(p, axis=1), -1)
        best_p[:, k] = np.where(has, p.max(axis=1), -1.0)
    for r in rows:
        cands = [int(env.current[r])]
        if not env.last_switch[r]:
            cands += [int(dep) for dep in depots if dep != env.current[r]]
        pos = {int(dep): k for k, dep in enumerate(depots)}
        out[r] = lookahead_choice(int(env.current[r]), cands,
                                  [best_p[r, pos[c]] for c in cands], [best_c[r, pos[c]] for c in cands])
    return out


# -- loss and optimizer -----------------------------------------------------------
def advantages(costs: np.ndarray) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    return costs - costs.mean(axis=-1, keepdims=True)


def reinforce_loss(batch: RolloutBatch) -> Tensor:
    """mean[(cost - shared mean cost) * log p]; advantages are constants."""
    if batch.logp is None:
        raise InvalidParameterError("rollout batch carries no log-probabilities")
    adv = advantages(batch.costs)
    return (batch.logp * adv).mean()


@dataclass
class AdamW:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-6
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def state_arrays(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out


def global_grad_norm(params: dict) -> float:
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    return math.sqrt(sq)


def clip_grads(params: dict, max_norm: Optional[float]) -> float:
    norm = global_grad_norm(params)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def optimizer_step(params: dict, opt: AdamW, lr: Optional[float] = None) -> None:
    """One AdamW update in place; raises on non-finite gradients."""
    bad = [k for k, p in params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        raise TrainingDivergenceError(f"non-finite gradient in {bad[:5]}", {"params": bad, "step": opt.t})
    lr = opt.lr if lr is None else lr
    opt.t += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for k, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = opt.m.get(k)
        v = opt.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        opt.m[k], opt.v[k] = m, v
        p.data = p.data - lr * opt.weight_decay * p.data
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


# -- training loop -------------------------------------------------------------------
def sample_batch(spec: ProblemSpec, cfg: TrainConfig, rng) -> tuple[list[Instance], list[list[int]]]:
    instances = [generate_instance(spec, cfg.n, int(rng.integers(0, 2**63)), cfg.scaler) for _ in range(cfg.batch_size)]
    seeds = []
    for inst in instances:
        dep = list(inst.depots)
        if not dep:
            # TSP family: a random node stands in for the depot seed
            seeds.append([int(rng.integers(inst.n_nodes))] if cfg.stochastic_pivots else [0])
        else:
            seeds.append(training_pivot_seeds(inst.n_nodes, dep, rng, cfg.stochastic_pivots))
    return instances, seeds


def train_loop(cfg: TrainConfig, policy: Policy, specs: Optional[Sequence[ProblemSpec]] = None,
               log_path: Optional[str] = None, checkpoint_dir: Optional[str] = None,
               eval_fn=None) -> list[dict]:
    """Train ``policy`` in place; returns the metric rows (also written as CSV)."""
    specs = list(specs) if specs is not None else [make_spec(p) for p in cfg.problems]
    if not specs:
        raise InvalidParameterError("need at least one problem")
    rng = make_rng(cfg.seed)
    opt = AdamW(lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    rows: list[dict] = []
    last_good = {k: v.data.copy() for k, v in policy.params.items()}
    writer = None
    fh = None
    if log_path:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
    try:
        it = 0
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            for _ in range(cfg.iters_per_epoch):
                spec = specs[int(rng.integers(len(specs)))]
                instances, seeds = sample_batch(spec, cfg, rng)
                batch = rollout_multistart(policy, instances, cfg.n_starts, "sample", rng, seeds)
                loss = reinforce_loss(batch)
                policy.zero_grad()
                tn.backward(loss)
                if not np.isfinite(loss.item()):
                    raise TrainingDivergenceError("non-finite loss", {"iter": it})
                norm = clip_grads(policy.params, cfg.grad_clip)
                try:
                    optimizer_step(policy.params, opt, lr)
                except TrainingDivergenceError:
                    for k, v in last_good.items():
                        policy.params[k].data = v
                    raise
                row = {
                    "iter": it, "problem": spec.name,
                    "mean_cost": float(batch.costs.min(axis=1).mean()),
                    "baseline_cost": float(batch.costs.mean()),
                    "grad_norm": norm, "lr": lr,
                }
                rows.append(row)
                if writer:
                    writer.writerow(row)
                it += 1
            last_good = {k: v.data.copy() for k, v in policy.params.items()}
            if checkpoint_dir:
                os.makedirs(checkpoint_dir, exist_ok=True)
                policy.save(os.path.join(checkpoint_dir, f"epoch{epoch + 1}.bin"), {"epoch": epoch + 1})
            if eval_fn is not None:
                eval_fn(epoch, policy)
    finally:
        if fh:
            fh.close()
    return rows


def sequence_log_likelihood(policy: Policy, inst: Instance, pi: Sequence[int],
                            seeds: Optional[Sequence[int]] = None, weights: Optional[np.ndarray] = None) -> Tensor:
    """Teacher-forced sum of (optionally weighted) log-probabilities of ``pi``."""
    seeds = list(seeds) if seeds is not None else (list(inst.depots) or [0])
    enc = policy.encode([inst], [seeds])
    env = BatchEnv([inst], starts=[pi[0]])
    view = trajectory_view(enc, env.inst)
    total = None
    for k, a in enumerate(pi[1:]):
        ok = env.feasible()
        mask = np.where(ok, 0.0, -1e9)
        logits = decode_logits(enc, view, env.first, env.current, env.problem_state(), mask, policy.cfg)
        term = tn.masked_log_softmax(logits, ok)[0, int(a)]
        if weights is not None:
            term = term * float(weights[k])
        total = term if total is None else total + term
        env.step(np.array([a]))
    return total
