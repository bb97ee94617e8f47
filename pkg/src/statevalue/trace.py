"""Rollout/group data model and the on-disk trace bundle.

A bundle is a directory holding ``index.jsonl`` (one JSON object per rollout,
ascending by ``(prompt_id, rollout_id)``) and ``hidden.f32`` (row-major
little-endian float32 hidden-state matrices, concatenated).

Token positions are 0-based over the *generated* portion: value ``t`` of a
rollout refers to the state whose last token is generated token ``t``.
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BundleFormatError, BundleIntegrityError, ValidationError

INDEX_FILE = "index.jsonl"
HIDDEN_FILE = "hidden.f32"

METHODS = ("grpo", "numca", "hista", "mcs", "external")

_INDEX_KEYS = ("rollout_id", "prompt_id", "tokens", "prompt_len", "reward",
               "terminal", "eta", "dim", "offset")


@dataclass(eq=False)
class Rollout:
    rollout_id: int
    prompt_id: int
    tokens: list[str]
    prompt_len: int
    reward: float
    hidden: np.ndarray
    terminal: bool = True

    def __post_init__(self):
        self.hidden = np.ascontiguousarray(self.hidden, dtype=np.float32)

    @property
    def eta(self) -> int:
        """Number of generated tokens."""
        return len(self.tokens) - self.prompt_len

    @property
    def dim(self) -> int:
        return self.hidden.shape[1] if self.hidden.ndim == 2 else 0

    @property
    def generated_tokens(self) -> list[str]:
        return self.tokens[self.prompt_len:]

    def validate(self) -> None:
        rid = self.rollout_id
        if self.prompt_len < 1 or self.prompt_len >= len(self.tokens):
            raise ValidationError(
                f"rollout {rid}: prompt_len={self.prompt_len} must be in [1, {len(self.tokens)})")
        if self.hidden.ndim != 2 or self.hidden.shape[1] < 1:
            raise ValidationError(f"rollout {rid}: hidden must be a 2-D matrix with d >= 1")
        if self.hidden.shape[0] != self.eta:
            raise ValidationError(
                f"rollout {rid}: hidden has {self.hidden.shape[0]} rows, expected eta={self.eta}")
        if not (isinstance(self.reward, (int, float)) and 0.0 <= self.reward <= 1.0):
            raise ValidationError(f"rollout {rid}: reward {self.reward!r} outside [0, 1]")
        if not np.all(np.isfinite(self.hidden)):
            raise ValidationError(f"rollout {rid}: hidden contains non-finite entries")


@dataclass(eq=False)
class Group:
    prompt_id: int
    rollouts: list[Rollout] = field(default_factory=list)

    @property
    def group_size(self) -> int:
        return len(self.rollouts)

    @property
    def rewards(self) -> list[float]:
        return [r.reward for r in self.rollouts]

    def mean_reward(self) -> float:
        if not self.rollouts:
            raise ValidationError(f"group {self.prompt_id} is empty")
        return math.fsum(self.rewards) / len(self.rollouts)

    def rollout(self, rollout_id: int) -> Rollout:
        for r in self.rollouts:
            if r.rollout_id == rollout_id:
                return r
        raise ValidationError(f"group {self.prompt_id} has no rollout {rollout_id}")

    def validate(self) -> None:
        if not self.rollouts:
            raise ValidationError(f"group {self.prompt_id} is empty")
        dims = set()
        for r in self.rollouts:
            if r.prompt_id != self.prompt_id:
                raise ValidationError(
                    f"rollout {r.rollout_id}: prompt_id {r.prompt_id} != group {self.prompt_id}")
            r.validate()
            dims.add(r.dim)
        if len(dims) != 1:
            raise ValidationError(f"group {self.prompt_id}: rollouts disagree on d ({sorted(dims)})")


@dataclass
class ValueAssignment:
    """Per-generated-token state values and advantages from one estimator."""

    rollout_id: int
    values: np.ndarray
    advantages: np.ndarray
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method tag {self.method!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        if self.values.shape != self.advantages.shape:
            raise ValidationError("values and advantages differ in length")


def group_rollouts(rollouts: Iterable[Rollout]) -> list[Group]:
    """Partition rollouts into groups ordered by (prompt_id, rollout_id)."""
    by_prompt: dict[int, list[Rollout]] = defaultdict(list)
    seen: set[int] = set()
    for r in rollouts:
        if r.rollout_id in seen:
            raise ValidationError(f"duplicate rollout_id {r.rollout_id}")
        seen.add(r.rollout_id)
        by_prompt[r.prompt_id].append(r)
    groups = []
    for pid in sorted(by_prompt):
        g = Group(pid, sorted(by_prompt[pid], key=lambda r: r.rollout_id))
        g.validate()
        groups.append(g)
    return groups


def assign(rollout: Rollout, values: Sequence[float] | np.ndarray, method: str,
           scale: float = 1.0) -> ValueAssignment:
    """Build a ValueAssignment with advantage ``(reward - value) / scale``."""
    values = np.asarray(values, dtype=np.float64)
    return ValueAssignment(rollout.rollout_id, values, (rollout.reward - values) / scale, method)


def advantage_scale(group: Group, normalize: bool, eps: float = 1e-6) -> float:
    """Divisor applied to advantages; group reward std + eps when normalizing."""
    if not normalize:
        return 1.0
    return float(np.std(np.asarray(group.rewards, dtype=np.float64))) + eps


def store_bundle(groups: Sequence[Group], path: str | os.PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rollouts = sorted((r for g in groups for r in g.rollouts),
                      key=lambda r: (r.prompt_id, r.rollout_id))
    offset = 0
    with open(path / INDEX_FILE, "w", encoding="utf-8") as idx, \
            open(path / HIDDEN_FILE, "wb") as hid:
        for r in rollouts:
            r.validate()
            record = {
                "rollout_id": int(r.rollout_id),
                "prompt_id": int(r.prompt_id),
                "tokens": list(r.tokens),
                "prompt_len": int(r.prompt_len),
                "reward": float(r.reward),
                "terminal": bool(r.terminal),
                "eta": int(r.eta),
                "dim": int(r.dim),
                "offset": offset,
            }
            idx.write(json.dumps(record) + "\n")
            payload = r.hidden.astype("<f4", copy=False).tobytes(order="C")
            hid.write(payload)
            offset += len(payload)


def _parse_index_line(line: str, lineno: int) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{INDEX_FILE} line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise BundleFormatError(f"{INDEX_FILE} line {lineno}: expected a JSON object")
    missing = [k for k in _INDEX_KEYS if k not in rec]
    if missing:
        raise BundleFormatError(f"{INDEX_FILE} line {lineno}: missing keys {missing}")
    for k in ("rollout_id", "prompt_id", "prompt_len", "eta", "dim", "offset"):
        if not isinstance(rec[k], int) or isinstance(rec[k], bool):
            raise BundleFormatError(f"{INDEX_FILE} line {lineno}: {k} must be an integer")
    if not isinstance(rec["tokens"], list) or not all(isinstance(t, str) for t in rec["tokens"]):
        raise BundleFormatError(f"{INDEX_FILE} line {lineno}: tokens must be a list of strings")
    if not isinstance(rec["reward"], (int, float)) or isinstance(rec["reward"], bool):
        raise BundleFormatError(f"{INDEX_FILE} line {lineno}: reward must be a number")
    if not isinstance(rec["terminal"], bool):
        raise BundleFormatError(f"{INDEX_FILE} line {lineno}: terminal must be a boolean")
    return rec


def load_bundle(path: str | os.PathLike) -> list[Group]:
    path = Path(path)
    index_path, hidden_path = path / INDEX_FILE, path / HIDDEN_FILE
    if not index_path.is_file() or not hidden_path.is_file():
        raise BundleFormatError(f"{path} must contain {INDEX_FILE} and {HIDDEN_FILE}")
    blob = hidden_path.read_bytes()
    records = []
    with open(index_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(_parse_index_line(line, lineno))

    rollouts, used = [], 0
    for rec in records:
        eta, dim, offset = rec["eta"], rec["dim"], rec["offset"]
        if eta < 0 or dim < 0 or offset < 0:
            raise BundleIntegrityError(f"rollout {rec['rollout_id']}: negative eta/dim/offset")
        nbytes = eta * dim * 4
        if offset + nbytes > len(blob):
            raise BundleIntegrityError(
                f"rollout {rec['rollout_id']}: needs bytes [{offset}, {offset + nbytes}) "
                f"but {HIDDEN_FILE} has {len(blob)}")
        hidden = np.frombuffer(blob, dtype="<f4", count=eta * dim, offset=offset)
        hidden = hidden.astype(np.float32).reshape(eta, dim)
        used += nbytes
        r = Rollout(rec["rollout_id"], rec["prompt_id"], rec["tokens"], rec["prompt_len"],
                    float(rec["reward"]), hidden, rec["terminal"])
        if r.eta != eta:
            raise ValidationError(
                f"rollout {r.rollout_id}: eta={eta} but tokens imply {r.eta}")
        rollouts.append(r)
    if used != len(blob):
        raise BundleIntegrityError(
            f"{HIDDEN_FILE} has {len(blob)} bytes but the index accounts for {used}")
    return group_rollouts(rollouts)
