"""Command-line front end: simulate, estimate, sveb, bench, check.

Exit codes: 0 success, 1 internal error or failed check suite, 2 usage or
config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from . import bench, theory
from .baselines import grpo_values
from .config import RunConfig, load_config
from .errors import ConfigError
from .hista import hista_values
from .numca import compile_patterns, numca_values
from .sveb import (CONTINUATIONS_FILE, Environment, build_report, difficulty_filter,
                   load_continuations, method_values, parse_method, parse_reference, run_sveb,
                   write_records, write_report)
from .synth import generate, load_latents, store_latents, LATENTS_FILE
from .trace import ValueAssignment, advantage_scale, assign, load_bundle, store_bundle


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _csv_list(text: str) -> list[str]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _resolve(args) -> RunConfig:
    """Config file, then command-line overrides, then validation."""
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = str(args.out)
    if getattr(args, "methods", None) is not None:
        cfg.methods = list(args.methods)
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "normalize", False):
        cfg.normalize = True
    cfg.validate()
    if cfg.out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return cfg


@contextmanager
def _executor(threads: int):
    n = (os.cpu_count() or 1) if threads == 0 else threads
    if n <= 1:
        yield None
        return
    with ThreadPoolExecutor(max_workers=n) as pool:
        yield pool


def _environment(bundle: Path, need_continuations: bool = False) -> Environment:
    env = Environment()
    if (bundle / LATENTS_FILE).is_file():
        env.latents, env.config = load_latents(bundle)
    elif need_continuations and (bundle / CONTINUATIONS_FILE).is_file():
        env.continuations = load_continuations(bundle)
    return env


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    env_cfg = cfg.env_config()
    with _executor(cfg.threads) as pool:
        groups, latents = generate(env_cfg, cfg.env["prompts"], cfg.env["rollouts_per_prompt"],
                                   executor=pool)
    out = Path(cfg.out)
    store_bundle(groups, out)
    store_latents(latents, env_cfg, out)
    cfg.write_resolved(out)
    print(f"wrote {sum(g.group_size for g in groups)} rollouts in {len(groups)} groups to {out}")
    return 0


def _estimate_group(group, method: str, cfg: RunConfig, env: Environment) -> list[ValueAssignment]:
    kind, _ = parse_method(method)
    if kind == "grpo":
        return grpo_values(group, cfg.normalize)
    if kind == "numca":
        return numca_values(group, compile_patterns(cfg.numca["patterns"]), cfg.normalize)
    if kind == "hista":
        return hista_values(group, cfg.hista_params(), cfg.normalize)
    states = [(r.rollout_id, t) for r in group.rollouts for t in range(r.eta)]
    vals = method_values(group, states, method, env, seed=cfg.seed)
    scale = advantage_scale(group, cfg.normalize)
    out, j = [], 0
    for r in group.rollouts:
        out.append(assign(r, vals[j:j + r.eta], "mcs", scale))
        j += r.eta
    return out


def cmd_estimate(args) -> int:
    cfg = _resolve(args)
    for m in cfg.methods:
        parse_method(m)
    bundle = Path(args.bundle)
    groups = load_bundle(bundle)
    env = _environment(bundle)
    if "hista" in cfg.methods:
        small = [g.prompt_id for g in groups if g.group_size < 2]
        if small:
            raise ConfigError(f"hista needs >= 2 rollouts per group; prompts {small[:5]} have 1")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with _executor(cfg.threads) as pool:
        for m in cfg.methods:
            job = lambda g, m=m: _estimate_group(g, m, cfg, env)
            chunks = map(job, groups) if pool is None else pool.map(job, groups)
            with open(out / f"values_{m}.jsonl", "w", encoding="utf-8") as fh:
                for chunk in chunks:
                    for a in chunk:
                        fh.write(json.dumps({"rollout_id": a.rollout_id, "method": m,
                                             "values": a.values.tolist(),
                                             "advantages": a.advantages.tolist()}) + "\n")
    cfg.write_resolved(out)
    print(f"wrote {', '.join(f'values_{m}.jsonl' for m in cfg.methods)} to {out}")
    return 0


def cmd_sveb(args) -> int:
    cfg = _resolve(args)
    reference = args.reference or cfg.reference()
    mode, _ = parse_reference(reference)
    for m in cfg.methods:
        parse_method(m)
    bundle = Path(args.bundle)
    env = _environment(bundle, need_continuations=mode == "mcs")
    if mode == "exact" and not env.synthetic:
        raise ConfigError(f"exact reference needs the {LATENTS_FILE} sidecar in {bundle}")
    groups = load_bundle(bundle)
    s = cfg.sveb
    kept = difficulty_filter(groups, s["filter_lo"], s["filter_hi"])
    if not kept:
        raise ConfigError(f"no group has mean reward in [{s['filter_lo']}, {s['filter_hi']}]")
    with _executor(cfg.threads) as pool:
        records = run_sveb(kept, cfg.methods, reference, env, cfg.hista_params(),
                           cfg.numca["patterns"], s["per_rollout"], cfg.seed, pool)
    report = build_report(records, cfg.methods, reference)
    out = Path(cfg.out)
    write_report(report, out, {"groups_total": len(groups), "groups_kept": len(kept)})
    write_records(records, out / "records.jsonl")
    cfg.write_resolved(out)
    for m in cfg.methods:
        print(f"{m:>10s}  mae={report.mae[m]:.6f}")
    print(f"{report.n_records} states from {len(kept)}/{len(groups)} groups, reference {reference}")
    return 0


def cmd_bench(args) -> int:
    rows = bench.run_bench(args.sizes, args.partner, args.dim, args.repeats, args.seed or 0)
    path = bench.write_bench(rows, args.out)
    for r in rows:
        print(f"n_states={r.n_states:6d}  cells={r.cells:9d}  seconds={r.seconds:.6f}")
    ratios = bench.doubling_ratios(rows)
    if ratios:
        print("doubling ratios: " + " ".join(f"{x:.2f}" for x in ratios))
    print(f"wrote {path}")
    return 0


def cmd_check(args) -> int:
    if args.list:
        for name in theory.SUITES:
            print(name)
        return 0
    names = args.only
    if args.inject_bug:
        results = [theory.check_softmax_lipschitz(seed=args.seed or 0, fn=theory.doubled_softmax)]
    else:
        results = theory.run_suite(names, seed=args.seed or 0)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        note = " (expected violations)" if r.expect_fail else ""
        print(f"{status}  {r.name:<30s} trials={r.trials:<7d} violations={r.violations}{note}"
              f"  {r.seconds:.2f}s")
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="statevalue", description="State value estimation for group rollouts.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, methods=False):
        sp.add_argument("--config", type=Path, help="TOML or JSON run config")
        sp.add_argument("--out", type=Path, help="output directory (overrides config)")
        sp.add_argument("--seed", type=_u64, help="RNG seed (overrides config)")
        sp.add_argument("--threads", type=int, help="worker threads, 0 = auto")
        if methods:
            sp.add_argument("--methods", type=_csv_list,
                            help="comma-separated: grpo, numca, hista, mcs@N")

    sp = sub.add_parser("simulate", help="generate a synthetic trace bundle")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate", help="write per-token values for each method")
    sp.add_argument("--bundle", type=Path, required=True)
    sp.add_argument("--normalize", action="store_true", help="divide advantages by group std")
    common(sp, methods=True)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("sveb", help="score methods against reference state values")
    sp.add_argument("--bundle", type=Path, required=True)
    sp.add_argument("--reference", help="exact or mcs@N (overrides config)")
    common(sp, methods=True)
    sp.set_defaults(func=cmd_sveb)

    sp = sub.add_parser("bench", help="time the prefix distance grid")
    sp.add_argument("--sizes", type=lambda s: [int(x) for x in _csv_list(s)],
                    default=[256, 512, 1024, 2048])
    sp.add_argument("--partner", type=int, default=256, help="state count of the fixed partner")
    sp.add_argument("--dim", type=int, default=16)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--seed", type=_u64)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("check", help="run the randomized inequality suite")
    sp.add_argument("--list", action="store_true", help="print suite names and exit")
    sp.add_argument("--only", type=_csv_list, help="comma-separated subset of suites")
    sp.add_argument("--seed", type=_u64)
    sp.add_argument("--inject-bug", action="store_true",
                    help="run the softmax check on a doubled-logit softmax (must fail)")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:  # config, validation and bundle errors
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
