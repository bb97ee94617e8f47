"""State value estimation benchmark: sampled states, reference values, MAE.

Every random draw is keyed by ``(seed, purpose, prompt_id or rollout_id)`` so a
run gives the same records whether groups are processed serially or on a
thread pool.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .baselines import grpo_values, mcs_values
from .errors import ConfigError, ValidationError
from .hista import HistaParams, hista_state_values
from .numca import DEFAULT_PATTERNS, compile_patterns, numca_values
from .synth import (EnvConfig, LatentTrace, ValueTable, exact_token_values, generate_prompt,
                    mc_state_values, state_after)
from .trace import Group

CONTINUATIONS_FILE = "continuations.jsonl"
HIST_EDGES = np.linspace(-1.0125, 1.0125, 82)

# stream tags for SeedSequence([seed, tag, ...])
_COLLECT, _REFERENCE, _ESTIMATE = 0xC011, 0x12EF, 0xE57

_MCS = re.compile(r"mcs@([1-9]\d*)")
BASE_METHODS = ("grpo", "numca", "hista")

State = tuple  # (prompt_id, rollout_id, token_index)


@dataclass
class SvebRecord:
    prompt_id: int
    rollout_id: int
    token_index: int
    reference: float
    estimates: dict[str, float] = field(default_factory=dict)


@dataclass
class SvebReport:
    methods: list[str]
    mae: dict[str, float]
    histograms: dict[str, np.ndarray]
    n_records: int
    reference: str
    edges: np.ndarray = field(default_factory=lambda: HIST_EDGES.copy())


def parse_method(name: str) -> tuple[str, int | None]:
    """'grpo' -> ('grpo', None); 'mcs@4' -> ('mcs', 4)."""
    name = name.strip()
    if name in BASE_METHODS:
        return name, None
    m = _MCS.fullmatch(name)
    if m:
        return "mcs", int(m.group(1))
    raise ConfigError(f"unknown method {name!r}; expected one of {BASE_METHODS} or mcs@N")


def parse_reference(name: str) -> tuple[str, int | None]:
    if name == "exact":
        return "exact", None
    m = _MCS.fullmatch(name)
    if m:
        return "mcs", int(m.group(1))
    raise ConfigError(f"reference must be 'exact' or 'mcs@N', got {name!r}")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def collect_states(groups: Sequence[Group], per_rollout: int = 5, seed: int = 0) -> list[State]:
    """Uniform sample of generated positions per rollout, without replacement, sorted."""
    if per_rollout < 1:
        raise ValidationError("per_rollout must be >= 1")
    out = []
    for g in groups:
        for r in g.rollouts:
            m = min(per_rollout, r.eta)
            idx = np.sort(_rng(seed, _COLLECT, r.rollout_id).choice(r.eta, size=m, replace=False))
            out.extend((g.prompt_id, r.rollout_id, int(t)) for t in idx)
    return out


def difficulty_filter(groups: Sequence[Group], lo: float = 0.1, hi: float = 0.8) -> list[Group]:
    """Keep groups whose mean reward lies in [lo, hi]."""
    return [g for g in groups if lo <= g.mean_reward() <= hi]


def generate_filtered(config: EnvConfig, n_prompts: int, rollouts_per_prompt: int,
                      lo: float = 0.1, hi: float = 0.8, max_prompts: int | None = None
                      ) -> tuple[list[Group], dict[int, LatentTrace]]:
    """Generate prompts 0, 1, ... until ``n_prompts`` groups pass the difficulty filter."""
    limit = max_prompts if max_prompts is not None else 50 * max(n_prompts, 1)
    groups, latents = [], {}
    pid = 0
    while len(groups) < n_prompts:
        if pid >= limit:
            raise ValidationError(
                f"only {len(groups)} of {n_prompts} prompts passed the filter after {limit} draws")
        g, traces = generate_prompt(config, pid, rollouts_per_prompt, pid * rollouts_per_prompt)
        if lo <= g.mean_reward() <= hi:
            groups.append(g)
            latents.update((tr.rollout_id, tr) for tr in traces)
        pid += 1
    return groups, latents


def load_continuations(path: str | os.PathLike) -> dict[tuple[int, int], list[float]]:
    """Offline continuation rewards: one ``{rollout_id, token_index, rewards}`` object per line."""
    path = Path(path)
    if path.is_dir():
        path = path / CONTINUATIONS_FILE
    if not path.is_file():
        raise ConfigError(f"no continuation rewards at {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[int(rec["rollout_id"]), int(rec["token_index"])] = [float(x) for x in rec["rewards"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path.name} line {lineno}: bad record ({exc})") from None
    return out


@dataclass
class Environment:
    """Optional synthetic ground truth attached to a bundle."""

    config: EnvConfig | None = None
    latents: Mapping[int, LatentTrace] | None = None
    continuations: Mapping[tuple[int, int], Sequence[float]] | None = None
    _table: ValueTable | None = field(default=None, repr=False)

    @property
    def synthetic(self) -> bool:
        return self.config is not None and self.latents is not None

    def table(self) -> ValueTable:
        if self._table is None:
            self._table = ValueTable(self.config)
        return self._table

    def latent(self, rollout_id: int) -> LatentTrace:
        try:
            return self.latents[rollout_id]
        except KeyError:
            raise ConfigError(f"latent sidecar has no rollout {rollout_id}") from None

    def post_states(self, group: Group, token_idx: Sequence[tuple[int, int]]):
        return [state_after(group.rollout(rid), self.latent(rid), self.config, t)
                for rid, t in token_idx]


def reference_values(group: Group, states: Sequence[tuple[int, int]], reference: str,
                     env: Environment, seed: int = 0) -> np.ndarray:
    """Reference V for ``(rollout_id, token_index)`` states of one group."""
    mode, n = parse_reference(reference)
    if not states:
        return np.zeros(0)
    if mode == "exact":
        if not env.synthetic:
            raise ConfigError("exact reference needs the latents.jsonl/env.json sidecars")
        cache = {}
        out = np.empty(len(states))
        for j, (rid, t) in enumerate(states):
            if rid not in cache:
                cache[rid] = exact_token_values(group.rollout(rid), env.latent(rid), env.config,
                                                env.table())
            out[j] = cache[rid][t]
        return out
    if env.synthetic:
        rng = _rng(seed, _REFERENCE, n, group.prompt_id)
        return mc_state_values(env.config, env.post_states(group, states), n, rng)
    if env.continuations is None:
        raise ConfigError(f"mcs@{n} reference needs env sidecars or {CONTINUATIONS_FILE}")
    conts = {}
    for rid, t in states:
        rewards = env.continuations.get((rid, t))
        if rewards is None or len(rewards) < n:
            raise ConfigError(f"{CONTINUATIONS_FILE} lacks {n} rewards for state ({rid}, {t})")
        conts[rid, t] = list(rewards)[:n]
    vals = mcs_values(group, conts)
    return np.array([vals[s] for s in states])


def method_values(group: Group, states: Sequence[tuple[int, int]], method: str, env: Environment,
                  hista_params: HistaParams = HistaParams(),
                  patterns: Sequence[str] = DEFAULT_PATTERNS, seed: int = 0) -> np.ndarray:
    """One estimator's values at ``(rollout_id, token_index)`` states of one group."""
    kind, n = parse_method(method)
    if not states:
        return np.zeros(0)
    if kind == "grpo":
        return np.full(len(states), group.mean_reward())
    if kind == "numca":
        by_rid = {a.rollout_id: a.values for a in numca_values(group, compile_patterns(patterns))}
        return np.array([by_rid[rid][t] for rid, t in states])
    if kind == "hista":
        return hista_state_values(group, hista_params, states)
    if not env.synthetic:
        raise ConfigError(f"{method} estimates need the env.json/latents.jsonl sidecars")
    rng = _rng(seed, _ESTIMATE, n, group.prompt_id)
    return mc_state_values(env.config, env.post_states(group, states), n, rng)


def _group_records(group: Group, states: list[State], methods: Sequence[str],
                   reference: str, env: Environment, hista_params: HistaParams,
                   patterns: Sequence[str], seed: int) -> list[SvebRecord]:
    pairs = [(rid, t) for _, rid, t in states]
    ref = reference_values(group, pairs, reference, env, seed)
    est = {m: method_values(group, pairs, m, env, hista_params, patterns, seed) for m in methods}
    return [SvebRecord(pid, rid, t, float(ref[j]), {m: float(est[m][j]) for m in methods})
            for j, (pid, rid, t) in enumerate(states)]


def run_sveb(groups: Sequence[Group], methods: Sequence[str], reference: str = "exact",
             env: Environment | None = None, hista_params: HistaParams = HistaParams(),
             patterns: Sequence[str] = DEFAULT_PATTERNS, per_rollout: int = 5, seed: int = 0,
             executor=None) -> list[SvebRecord]:
    """Score ``methods`` on sampled states of ``groups``; records ordered by state."""
    env = env or Environment()
    for m in methods:
        parse_method(m)
    parse_reference(reference)
    if "hista" in methods:
        small = [g.prompt_id for g in groups if g.group_size < 2]
        if small:
            raise ValidationError(f"hista needs >= 2 rollouts per group; prompts {small[:5]} have 1")
    states = collect_states(groups, per_rollout, seed)
    by_group: dict[int, list[State]] = {}
    for s in states:
        by_group.setdefault(s[0], []).append(s)
    jobs = [(g, by_group.get(g.prompt_id, [])) for g in groups]

    def work(job):
        g, st = job
        return _group_records(g, st, methods, reference, env, hista_params, patterns, seed)

    results = map(work, jobs) if executor is None else executor.map(work, jobs)
    return [rec for chunk in results for rec in chunk]


def mae(records: Sequence[SvebRecord], method: str) -> float:
    if not records:
        raise ValidationError("no records")
    errs = []
    for rec in records:
        if method not in rec.estimates:
            raise ValidationError(
                f"record ({rec.rollout_id}, {rec.token_index}) has no {method!r} estimate")
        errs.append(abs(rec.estimates[method] - rec.reference))
    return math.fsum(errs) / len(errs)


def diff_histogram(records: Sequence[SvebRecord], method: str,
                   edges: np.ndarray = HIST_EDGES) -> np.ndarray:
    """Counts of (method - grpo) estimate differences over fixed bins."""
    diffs = []
    for rec in records:
        if "grpo" not in rec.estimates or method not in rec.estimates:
            raise ValidationError(f"record ({rec.rollout_id}, {rec.token_index}) lacks grpo/{method}")
        diffs.append(rec.estimates[method] - rec.estimates["grpo"])
    counts, _ = np.histogram(np.clip(diffs, edges[0], edges[-1]), bins=edges)
    return counts


def build_report(records: Sequence[SvebRecord], methods: Sequence[str],
                 reference: str = "exact") -> SvebReport:
    hists = {}
    if records and all("grpo" in r.estimates for r in records):
        hists = {m: diff_histogram(records, m) for m in methods}
    return SvebReport(list(methods), {m: mae(records, m) for m in methods}, hists,
                      len(records), reference)


def write_report(report: SvebReport, out: str | os.PathLike, extra: Mapping | None = None) -> None:
    """report.csv, hist_<method>.csv and sveb_meta.json (``extra`` is merged into the meta)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "mae", "n_records"])
        for m in report.methods:
            w.writerow([m, repr(report.mae[m]), report.n_records])
    for m, counts in report.histograms.items():
        with open(out / f"hist_{m}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(report.edges[:-1], report.edges[1:], counts):
                w.writerow([f"{lo:.4f}", f"{hi:.4f}", int(c)])
    meta = {"reference": report.reference, "n_records": report.n_records,
            "methods": list(report.methods), **(extra or {})}
    with open(out / "sveb_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_records(records: Sequence[SvebRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"prompt_id": rec.prompt_id, "rollout_id": rec.rollout_id,
                                 "token_index": rec.token_index, "reference": rec.reference,
                                 "estimates": rec.estimates}) + "\n")
