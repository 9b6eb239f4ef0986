"""Property suites behind ``quasiroute check``.

Each suite returns a CheckResult; ``passed`` is False on any violation and
``detail`` records the worst observed quantity.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional

import numpy as np

from . import tensor as tn
from .batch_env import random_rollouts
from .env import audit_routes, route_cost, validate_solution
from .errors import EnvInvariantError
from .learn import rollout_multistart, sequence_log_likelihood
from .pivots import (
    BourgainConfig, PivotSet, bfr_embed, bourgain_embed, covering_radius, distortion,
    fps_select, outgoing_embed, pairwise_norms, separation_matrix,
)
from .policy import Policy, get_preset
from .quasimetric import (
    DistanceMatrix, check_quasimetric, gen_asymmetric, gen_euclidean, make_rng,
    min_plus_closure, symmetrize_max, symmetrize_mean,
)
from .variants import catalog, generate_instance, make_spec

GEOMETRY_TOL = 1e-9
PRIMITIVE_TOL = 1e-6
MODEL_GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        info = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items())
        return f"[{status}] {self.name} ({self.seconds:.1f}s) {info}"


def _fmt(v):
    return f"{v:.3g}" if isinstance(v, float) else str(v)


def _timed(name: str, fn: Callable[[], tuple[bool, dict]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# -- geometry ----------------------------------------------------------------
def bfr_bound_slack(d: np.ndarray, pivots: PivotSet) -> dict:
    """Worst slack of the three embedding bounds over all ordered pairs.

    Positive values are violations: Lipschitz is ||dPhi|| - Dsym, separation
    is s_P / sqrt(2M) - ||dPhi||, coverage is (Dsym - 2 rho)_+ / sqrt(2M) - ||dPhi||.
    """
    dsym = symmetrize_max(d).d
    emb = bfr_embed(d, pivots).coords
    dist = pairwise_norms(emb)
    root = math.sqrt(2 * pivots.M)
    rho = covering_radius(dsym, pivots)
    off = ~np.eye(d.shape[0], dtype=bool)
    lip = dist - dsym
    sep = separation_matrix(d, pivots) / root - dist
    cov = np.maximum(0.0, dsym - 2.0 * rho) / root - dist
    return {"lipschitz": float(lip[off].max()), "separation": float(sep[off].max()),
            "coverage": float(cov[off].max())}


def geometry_suite(n_instances: int = 200, n: int = 30, seed: int = 0,
                   pivot_counts=(2, 4, 8)) -> CheckResult:
    def run():
        rng = make_rng(seed)
        worst = {"lipschitz": -np.inf, "separation": -np.inf, "coverage": -np.inf}
        for kind in ("asymmetric", "euclidean"):
            for _ in range(n_instances):
                s = int(rng.integers(2**62))
                d = gen_asymmetric(n, s).d if kind == "asymmetric" else gen_euclidean(n, s)[1].d
                M = int(rng.choice(pivot_counts))
                piv = PivotSet(tuple(rng.choice(n, size=M, replace=False)))
                for k, v in bfr_bound_slack(d, piv).items():
                    worst[k] = max(worst[k], v)
        ok = all(v <= GEOMETRY_TOL for v in worst.values())
        return ok, dict(worst, instances=2 * n_instances)
    return _timed("geometry", run)


def corollary_instance() -> DistanceMatrix:
    """Three nodes (p, v_i, v_j) whose outgoing distances to p coincide."""
    edges = np.array([[0.0, 2.0, 1.0],
                      [1.0, 0.0, 1.0],
                      [1.0, 2.0, 0.0]])
    return min_plus_closure(edges)


def bidirectionality_suite() -> CheckResult:
    def run():
        d = corollary_instance()
        piv = PivotSet((0,))
        out = outgoing_embed(d, piv)
        bfr = bfr_embed(d, piv).coords
        collapse = float(np.linalg.norm(out[1] - out[2]))
        sep = float(np.linalg.norm(bfr[1] - bfr[2]))
        err = abs(sep - 1.0 / math.sqrt(2.0))
        alpha_out = distortion(symmetrize_max(d), out)[0]
        ok = collapse == 0.0 and err <= 1e-12 and alpha_out == 0.0
        return ok, {"outgoing_gap": collapse, "bfr_gap": sep, "error": err}
    return _timed("bidirectionality", run)


def optimal_covering_radius(d: np.ndarray, M: int, seeds=()) -> float:
    n = d.shape[0]
    seeds = list(seeds)
    rest = [v for v in range(n) if v not in seeds]
    best = np.inf
    for extra in combinations(rest, M - len(seeds)):
        best = min(best, covering_radius(d, seeds + list(extra)))
    return best


def fps_suite(n_metrics: int = 50, max_n: int = 12, max_M: int = 4, seed: int = 0) -> CheckResult:
    def run():
        rng = make_rng(seed)
        worst = 0.0
        for t in range(n_metrics):
            n = int(rng.integers(max_M + 1, max_n + 1))
            s = int(rng.integers(2**62))
            d = gen_asymmetric(n, s) if t % 2 == 0 else gen_euclidean(n, s)[1]
            dfps = symmetrize_mean(d).d
            M = int(rng.integers(1, max_M + 1))
            n_seeds = int(rng.integers(0, M))
            seeds = [int(v) for v in rng.choice(n, size=n_seeds, replace=False)]
            if not seeds:
                seeds = [int(rng.integers(n))]
            greedy = covering_radius(dfps, fps_select(dfps, M, seeds))
            opt = optimal_covering_radius(dfps, M, seeds)
            worst = max(worst, greedy / opt if opt > 0 else (0.0 if greedy == 0 else np.inf))
        return worst <= 2.0 + 1e-12, {"worst_ratio": worst, "metrics": n_metrics}
    return _timed("fps", run)


def quasimetric_suite(n_instances: int = 100, n: int = 50, seed: int = 0) -> CheckResult:
    def run():
        rng = make_rng(seed)
        bad = 0
        not_idempotent = 0
        for _ in range(n_instances):
            d = gen_asymmetric(n, int(rng.integers(2**62)))
            if check_quasimetric(d.d, sample=None if n <= 50 else 0):
                bad += 1
            if not np.array_equal(min_plus_closure(d).d, d.d):
                not_idempotent += 1
        return bad == 0 and not_idempotent == 0, {"violating": bad, "not_idempotent": not_idempotent}
    return _timed("quasimetric", run)


def bourgain_suite(n_instances: int = 50, max_n: int = 64, seed: int = 0) -> CheckResult:
    def run():
        rng = make_rng(seed)
        worst = -np.inf
        finite = 0
        for t in range(n_instances):
            n = int(rng.integers(8, max_n + 1))
            s = int(rng.integers(2**62))
            d = symmetrize_max(gen_asymmetric(n, s)).d if t % 2 == 0 else gen_euclidean(n, s)[1].d
            emb = bourgain_embed(d, BourgainConfig(n=n, seed=s))
            off = ~np.eye(n, dtype=bool)
            worst = max(worst, float((pairwise_norms(emb) - d)[off].max()))
            finite += math.isfinite(distortion(d, emb)[2])
        rate = finite / n_instances
        return worst <= GEOMETRY_TOL and rate >= 0.95, {"expansion_slack": worst, "finite_rate": rate}
    return _timed("bourgain", run)


# -- environment -------------------------------------------------------------
def mask_fuzz(n: int = 20, rollouts: int = 100, seed: int = 0, names=None) -> CheckResult:
    def run():
        entries = catalog() if names is None else [(nm, make_spec(nm)) for nm in names]
        violations = 0
        dead_ends = 0
        cost_mismatch = 0
        first_bad: Optional[str] = None
        for k, (name, spec) in enumerate(entries):
            inst = generate_instance(spec, n, seed + k)
            try:
                env = random_rollouts(inst, rollouts, seed + k)
            except EnvInvariantError as exc:
                dead_ends += 1
                first_bad = first_bad or f"{name}: {exc}"
                continue
            objective = env.objective()
            for r, pi in enumerate(env.sequences()):
                problems = validate_solution(inst, pi) + audit_routes(inst, pi)
                if problems:
                    violations += 1
                    first_bad = first_bad or f"{name}: {problems[0]}"
                if abs(route_cost(inst, pi) - objective[r]) > 1e-9:
                    cost_mismatch += 1
        ok = violations == 0 and dead_ends == 0 and cost_mismatch == 0
        detail = {"variants": len(entries), "violations": violations, "dead_ends": dead_ends,
                  "cost_mismatch": cost_mismatch}
        if first_bad:
            detail["first"] = first_bad
        return ok, detail
    return _timed("masks", run)


# -- differentiation -----------------------------------------------------------
def primitive_grad_suite(seed: int = 0) -> CheckResult:
    """Central-difference checks of each primitive on small random inputs."""
    def run():
        rng = np.random.default_rng(seed)
        T = lambda *shape: tn.Tensor(rng.normal(size=shape), requires_grad=True)
        pos = lambda *shape: tn.Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)
        mask = np.array([[True, False, True, True], [True, True, False, True], [False, True, True, True]])
        weights = tn.Tensor(rng.normal(size=(3, 4)))
        norm_w = tn.Tensor(rng.normal(size=(2, 5, 3)))
        cases = {
            "add": (lambda a, b: tn.tsum(tn.mul(a + b, a)), [T(3, 4), T(4)]),
            "div": (lambda a, b: tn.tsum(a / b), [T(3, 4), pos(3, 1)]),
            "matmul": (lambda a, b: tn.tsum(tn.tanh(a @ b)), [T(2, 3, 4), T(4, 5)]),
            "sigmoid": (lambda a: tn.tsum(tn.sigmoid(a) * a), [T(5, 3)]),
            "exp_log": (lambda a: tn.tsum(tn.log(tn.exp(a) + 1.0)), [T(4, 4)]),
            "sqrt": (lambda a: tn.tsum(tn.sqrt(a)), [pos(6)]),
            "mean_transpose": (lambda a: tn.tsum(tn.mean(a, axis=0) * a.T[0]), [T(4, 4)]),
            "concat_getitem": (lambda a, b: tn.tsum(tn.tanh(tn.concat([a, b], axis=1)[:, 1:4])), [T(3, 2), T(3, 3)]),
            "masked_log_softmax": (lambda a: tn.tsum(tn.masked_log_softmax(a, mask)[np.nonzero(mask)] * 0.7),
                                   [T(3, 4)]),
            "masked_softmax": (lambda a: tn.tsum(tn.masked_softmax(a, mask) * weights), [T(3, 4)]),
            "instance_norm": (lambda a: tn.tsum(tn.instance_norm(a) * norm_w), [T(2, 5, 3)]),
            "gather_rows": (lambda a: tn.tsum(tn.sigmoid(tn.gather_rows(a, [2, 0, 2]))), [T(3, 4, 2)]),
            "relu_broadcast": (lambda a: tn.tsum(tn.relu(tn.broadcast_to(a, (3, 4)) - 0.1) * weights), [T(1, 4)]),
        }
        errs = {}
        for name, (f, xs) in cases.items():
            errs[name] = tn.grad_check(f, xs, oracle_dtype=np.longdouble)
        worst = max(errs, key=errs.get)
        return errs[worst] <= PRIMITIVE_TOL, {"worst": errs[worst], "worst_case": worst, "cases": len(errs)}
    return _timed("grad_primitives", run)


def full_model_grad_error(n: int = 8, problem: str = "PDCVRP", seed: int = 3,
                          max_entries: Optional[int] = 24) -> float:
    """Max relative error of the desk-preset model gradient.

    The loss is a weighted teacher-forced log-likelihood of a greedy solution.
    Adapter parameters are redrawn at unit scale so every decoder path has
    O(1) sensitivity; finite differences are evaluated in extended precision.
    """
    cfg = get_preset("desk")
    pol = Policy(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for k, v in pol.params.items():
        if k.endswith(".g") or k.endswith(".up"):
            v.data = rng.normal(0.0, 1.0, v.data.shape)
    inst = generate_instance(make_spec(problem), n, seed)
    pi = rollout_multistart(pol, [inst], mode="greedy", force_first=False, track_grad=False).sequences[0]
    w = rng.uniform(0.5, 1.5, len(pi))
    names = list(pol.params)

    def loss(*ts):
        return sequence_log_likelihood(Policy(cfg, dict(zip(names, ts))), inst, pi, weights=w)

    return tn.grad_check(loss, pol.parameters(), max_entries=max_entries, seed=seed,
                         oracle_dtype=np.longdouble)


def model_grad_suite(n: int = 8, max_entries: Optional[int] = 24) -> CheckResult:
    def run():
        err = full_model_grad_error(n=n, max_entries=max_entries)
        return err <= MODEL_GRAD_TOL, {"max_rel_error": err}
    return _timed("grad_model", run)


SUITES = {
    "geometry": geometry_suite,
    "bidirectionality": bidirectionality_suite,
    "fps": fps_suite,
    "quasimetric": quasimetric_suite,
    "bourgain": bourgain_suite,
    "masks": mask_fuzz,
    "grad": lambda: _merge("grad", [primitive_grad_suite(), model_grad_suite()]),
}


def _merge(name: str, results: list[CheckResult]) -> CheckResult:
    detail = {}
    for r in results:
        detail.update({f"{r.name}.{k}": v for k, v in r.detail.items()})
    return CheckResult(name, all(r.passed for r in results), detail, sum(r.seconds for r in results))


def run_suites(names) -> list[CheckResult]:
    return [SUITES[n]() for n in names]
