"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, default_config, load_config
from .env import solution_to_json
from .errors import (
    ContractError, EnvInvariantError, InvalidInputError, QuasirouteError, TrainingDivergenceError,
)
from .learn import TrainConfig, train_loop
from .pivots import BourgainConfig, bfr_embed, bourgain_embed, distortion, fps_select
from .policy import Policy, describe, get_preset
from .quasimetric import symmetrize_max, symmetrize_mean
from .solve import default_views, greedy_decode, objective_gap, solve_baseline
from .variants import (
    Instance, TimeWindowScheme, catalog, catalog_names, dumps_instance, generate_instance,
    instance_to_json, loads_instance, make_spec,
)
from .vrplib import load_vrplib

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------------
def _spec(name: str, cfg: RunConfig):
    spec = make_spec(name)
    if spec.TW:
        spec = replace(spec, tw_scheme=TimeWindowScheme(cfg.tw_width_low, cfg.tw_width_high))
    return spec


def _model_config(cfg: RunConfig):
    kw = dict(zeta=cfg.zeta, wdad_eps=cfg.wdad_eps, norm_eps=cfg.norm_eps)
    if cfg.n_pivots > 0:
        kw["n_pivots"] = cfg.n_pivots
    return get_preset(cfg.preset, **kw)


def _policy(cfg: RunConfig, checkpoint: Optional[str]) -> Policy:
    if checkpoint:
        return Policy.load(checkpoint)
    return Policy(_model_config(cfg), seed=cfg.seed)


def _threads(cfg: RunConfig) -> int:
    env = os.environ.get("QUASIROUTE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"QUASIROUTE_THREADS must be an integer, got {env!r}") from None
    return max(1, int(cfg.threads))


def _read_instance(path: str) -> Instance:
    try:
        if path.lower().endswith((".vrp", ".tsp", ".atsp")):
            return load_vrplib(path)
        with open(path, encoding="utf-8") as fh:
            return loads_instance(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InvalidInputError(f"{path}: malformed instance JSON ({exc})") from None


def _write(path: Optional[str], text: str):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- subcommands ---------------------------------------------------------------------
def cmd_gen(args, cfg: RunConfig) -> int:
    spec = _spec(args.problem, cfg)
    n = args.n if args.n is not None else cfg.n
    insts = [generate_instance(spec, n, cfg.seed + k, cfg.scaler) for k in range(args.count)]
    if args.count == 1:
        text = dumps_instance(insts[0]) + "\n"
    else:
        text = json.dumps([instance_to_json(i) for i in insts], indent=1) + "\n"
    _write(args.out, text)
    return EXIT_OK


def cmd_embed(args, cfg: RunConfig) -> int:
    inst = _read_instance(args.instance)
    M = args.pivots or _model_config(cfg).n_pivots
    if M > inst.n_nodes:
        raise UsageError(f"--pivots {M} exceeds the {inst.n_nodes} nodes of the instance")
    dsym = symmetrize_max(inst.dist)
    rows, report = [], []
    if args.bourgain:
        emb = bourgain_embed(dsym, BourgainConfig(n=inst.n_nodes, seed=cfg.seed))
        rows += [[0, v, *emb[v]] for v in range(inst.n_nodes)]
        report.append(("bourgain", 0, *distortion(dsym, emb)))
    else:
        dfps = symmetrize_mean(inst.dist)
        for k, seeds in enumerate(default_views(inst, args.views, cfg.seed)):
            seeds = seeds[:M]
            emb = bfr_embed(inst.dist, fps_select(dfps, M, seeds)).coords
            rows += [[k, v, *emb[v]] for v in range(inst.n_nodes)]
            report.append(("bfr", k, *distortion(dsym, emb)))
    width = len(rows[0]) - 2
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["view", "node"] + [f"c{j}" for j in range(width)])
        for r in rows:
            w.writerow(r[:2] + [f"{x:.12g}" for x in r[2:]])
    finally:
        if args.out:
            out.close()
    dest = sys.stderr if not args.out else sys.stdout
    for kind, k, a, b, dist in report:
        print(f"{kind} view={k} alpha={a:.6g} beta={b:.6g} distortion={dist:.6g}", file=dest)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    problems = tuple(p.strip() for p in (args.problems or cfg.problems).split(",") if p.strip())
    tcfg = TrainConfig(
        lr=args.lr if args.lr is not None else cfg.lr, weight_decay=cfg.weight_decay,
        batch_size=args.batch if args.batch is not None else cfg.batch_size,
        epochs=cfg.epochs, iters_per_epoch=args.iters if args.iters is not None else cfg.iters_per_epoch,
        decay_epochs=cfg.int_list("decay_epochs"), decay_factor=cfg.decay_factor,
        n_starts=cfg.n_starts or None, problems=problems,
        n=args.n if args.n is not None else cfg.n, seed=cfg.seed,
        grad_clip=cfg.grad_clip or None, stochastic_pivots=cfg.stochastic_pivots, scaler=cfg.scaler,
    )
    policy = _policy(cfg, args.resume)
    specs = [_spec(p, cfg) for p in problems]
    rows = train_loop(tcfg, policy, specs, log_path=args.log)
    policy.save(args.out, {"iterations": len(rows), "problems": list(problems)})
    last = rows[-1]
    print(f"trained {len(rows)} iterations; last mean_cost={last['mean_cost']:.4f}; saved {args.out}")
    return EXIT_OK


def _reference(inst: Instance, kind: str) -> Optional[float]:
    return None if kind == "none" else solve_baseline(inst)[1]


def cmd_solve(args, cfg: RunConfig) -> int:
    inst = _read_instance(args.instance)
    policy = _policy(cfg, args.checkpoint)
    views = default_views(inst, args.views or cfg.views, cfg.seed)
    ref = _reference(inst, args.ref)
    rep = greedy_decode(inst, policy, views, ref_cost=ref, lookahead=cfg.lookahead)
    doc = rep.to_json()
    doc["solution"] = solution_to_json(inst, rep.best_pi)
    _write(args.out, json.dumps(doc, indent=1) + "\n")
    if args.out:
        gap = "n/a" if rep.gap_percent is None else f"{rep.gap_percent:.2f}%"
        print(f"cost={rep.best_cost:.6g} gap={gap} views={len(views)}")
    return EXIT_INVALID if rep.violations else EXIT_OK


def _bench_one(name: str, cfg: RunConfig, policy: Policy, n: int, count: int, views: int) -> float:
    spec = _spec(name, cfg)
    gaps = []
    for k in range(count):
        inst = generate_instance(spec, n, cfg.seed + k, cfg.scaler)
        ref = solve_baseline(inst)[1]
        rep = greedy_decode(inst, policy, default_views(inst, views, cfg.seed), lookahead=cfg.lookahead)
        if rep.violations:
            raise EnvInvariantError(f"{name}: decoded solution violates constraints: {rep.violations[0]}")
        gaps.append(objective_gap(inst, rep.best_cost, ref))
    return float(np.mean(gaps))


def cmd_bench(args, cfg: RunConfig) -> int:
    policy = _policy(cfg, args.checkpoint)
    names = catalog_names() if args.problems == "all" else [p.strip() for p in args.problems.split(",")]
    for nm in names:
        make_spec(nm)
    n = args.n if args.n is not None else cfg.n
    views = args.views or cfg.views
    with ThreadPoolExecutor(max_workers=_threads(cfg)) as pool:
        gaps = dict(zip(names, pool.map(lambda nm: _bench_one(nm, cfg, policy, n, args.instances, views), names)))
    base = []
    for nm in names:
        b = nm[1:] if nm.startswith("A") and nm[1:] in catalog_names() else nm
        if b not in base:
            base.append(b)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["variant", "symmetric_gap", "asymmetric_gap", "average"])
        for b in base:
            s, a = gaps.get(b), gaps.get("A" + b)
            vals = [v for v in (s, a) if v is not None]
            w.writerow([b] + ["" if v is None else f"{v:.4f}" for v in (s, a)] + [f"{np.mean(vals):.4f}"])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_check(args, cfg: RunConfig) -> int:
    from .checks import SUITES, run_suites
    names = list(SUITES) if args.suite == "all" else [s.strip() for s in args.suite.split(",")]
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)} or all")
    results = run_suites(names)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def cmd_catalog(args, cfg: RunConfig) -> int:
    for name, spec in catalog():
        if args.verbose:
            flags = "".join(f for f, on in spec.flags.items() if on)
            print(f"{name}\t{'sym' if spec.symmetric else 'asym'}\t{flags or '-'}")
        else:
            print(name)
    return EXIT_OK


def cmd_model(args, cfg: RunConfig) -> int:
    policy = _policy(cfg, args.checkpoint)
    counts = describe(policy.params)
    for k, v in counts.items():
        print(f"{k}\t{v}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------
def _global_flags(p: argparse.ArgumentParser, default):
    p.add_argument("--seed", type=int, default=default, help="master seed (overrides the config)")
    p.add_argument("--config", default=default, help="key = value configuration file")
    p.add_argument("--preset", choices=["desk", "paper"], default=default, help="model preset")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quasiroute", description="Pivot-embedding neural solver for symmetric and asymmetric VRPs.")
    _global_flags(p, None)
    # the same flags are accepted after the subcommand name
    common = _Parser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    add = lambda name, **kw: sub.add_parser(name, parents=[common], **kw)

    g = add("gen", help="generate instances as JSON")
    g.add_argument("--problem", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    e = add("embed", help="export BFR or Bourgain coordinates and report distortion")
    e.add_argument("--instance", required=True)
    e.add_argument("--pivots", type=int)
    e.add_argument("--views", type=int, default=1)
    e.add_argument("--bourgain", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_embed)

    t = add("train", help="REINFORCE training with a shared multi-start baseline")
    t.add_argument("--problems")
    t.add_argument("--n", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume")
    t.add_argument("--log")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = add("solve", help="greedy multi-view decoding of one instance")
    s.add_argument("--instance", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--views", type=int)
    s.add_argument("--ref", choices=["auto", "none"], default="auto")
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    b = add("bench", help="catalog sweep with a gap table")
    b.add_argument("--checkpoint")
    b.add_argument("--problems", default="all")
    b.add_argument("--n", type=int)
    b.add_argument("--instances", type=int, default=4)
    b.add_argument("--views", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    c = add("check", help="run property suites")
    c.add_argument("--suite", default="all")
    c.set_defaults(func=cmd_check)

    k = add("catalog", help="list the variant catalog")
    k.add_argument("--verbose", action="store_true")
    k.set_defaults(func=cmd_catalog)

    m = add("model", help="model utilities")
    msub = m.add_subparsers(dest="action", parser_class=_Parser)
    d = msub.add_parser("describe", parents=[common], help="parameter counts per block")
    d.add_argument("--checkpoint")
    d.set_defaults(func=cmd_model)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError(parser.format_usage().strip())
        cfg = load_config(args.config) if args.config else default_config()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.preset is not None:
            overrides["preset"] = args.preset
        cfg = cfg.with_overrides(**overrides)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EnvInvariantError, ContractError, TrainingDivergenceError) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except QuasirouteError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
