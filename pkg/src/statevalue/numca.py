"""Numerical milestone credit assignment.

Numbers in the generated text act as milestones. The abstract state after a
token is the set of milestones seen so far; its value is the mean terminal
reward of the group's rollouts that ever entered it, and every token inherits
the value of the abstract state active at that token.
"""

from __future__ import annotations

import bisect
import math
import re
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .trace import Group, Rollout, ValueAssignment, advantage_scale, assign

PATTERNS = {
    "latex_fraction": r"\\[dt]?frac\{\s*(?P<ln>[-+]?\d+)\s*\}\{\s*(?P<ld>[-+]?\d+)\s*\}",
    "slash_fraction": r"(?P<sn>[-+]?\d+)/(?P<sd>[-+]?\d+)",
    "decimal": r"(?P<dec>[-+]?\d+\.\d+)",
    "signed_integer": r"(?P<int>[-+]?\d+)",
}
DEFAULT_PATTERNS = ("latex_fraction", "slash_fraction", "decimal", "signed_integer")

AbstractState = frozenset
MilestoneTable = dict


def _normalize_int(s: str) -> str:
    sign = "-" if s.startswith("-") else ""
    digits = s.lstrip("+-").lstrip("0") or "0"
    return digits if digits == "0" else sign + digits


def _normalize_decimal(s: str) -> str:
    whole, frac = s.split(".")
    sign = "-" if whole.startswith("-") else ""
    return f"{sign}{whole.lstrip('+-').lstrip('0') or '0'}.{frac}"


def compile_patterns(names: Sequence[str] = DEFAULT_PATTERNS) -> re.Pattern:
    """Combine named patterns into one alternation tried in order (longest forms first)."""
    unknown = [n for n in names if n not in PATTERNS]
    if unknown:
        raise ValidationError(f"unknown milestone patterns {unknown}; known: {sorted(PATTERNS)}")
    if not names:
        raise ValidationError("at least one milestone pattern is required")
    ordered = [n for n in DEFAULT_PATTERNS if n in names]
    return re.compile("|".join(f"(?:{PATTERNS[n]})" for n in ordered))


def _normalize(m: re.Match) -> str:
    g = m.groupdict()
    if g.get("ln") is not None:
        return f"{_normalize_int(g['ln'])}/{_normalize_int(g['ld'])}"
    if g.get("sn") is not None:
        return f"{_normalize_int(g['sn'])}/{_normalize_int(g['sd'])}"
    if g.get("dec") is not None:
        return _normalize_decimal(g["dec"])
    return _normalize_int(g["int"])


def _matches(text: str, pattern: re.Pattern) -> list[tuple[int, str]]:
    """(end offset, normalized milestone) for every non-overlapping match."""
    return [(m.end(), _normalize(m)) for m in pattern.finditer(text)]


def extract_milestones(text: str, patterns: Sequence[str] | re.Pattern = DEFAULT_PATTERNS
                       ) -> list[str]:
    pattern = patterns if isinstance(patterns, re.Pattern) else compile_patterns(patterns)
    return [value for _, value in _matches(text, pattern)]


def abstract_states(rollout: Rollout, pattern: re.Pattern) -> list[frozenset]:
    """Abstract state after each generated token.

    Matching runs on the concatenated generated text; a milestone becomes
    active at the token holding its last character.
    """
    gen = rollout.generated_tokens
    ends = np.cumsum([len(t) for t in gen]).tolist()
    new_at: dict[int, list[str]] = {}
    for end, value in _matches("".join(gen), pattern):
        t = bisect.bisect_left(ends, end)
        new_at.setdefault(t, []).append(value)
    states, current = [], frozenset()
    for t in range(len(gen)):
        if t in new_at:
            current = current | frozenset(new_at[t])
        states.append(current)
    return states


def _visited(states: list[frozenset]) -> list[frozenset]:
    """Distinct abstract states in visiting order, starting from the empty state."""
    out, prev = [frozenset()], frozenset()
    for s in states:
        if s != prev:
            out.append(s)
            prev = s
    return out


def build_table(group: Group, patterns: Sequence[str] | re.Pattern = DEFAULT_PATTERNS
                ) -> MilestoneTable:
    """Map abstract state -> (count, reward_sum) over the group's rollouts."""
    if group.group_size == 0:
        raise ValidationError(f"group {group.prompt_id} is empty")
    pattern = patterns if isinstance(patterns, re.Pattern) else compile_patterns(patterns)
    rewards: dict[frozenset, list[float]] = {}
    for r in group.rollouts:
        for s in _visited(abstract_states(r, pattern)):
            rewards.setdefault(s, []).append(r.reward)
    return {s: (len(v), math.fsum(v)) for s, v in rewards.items()}


def table_values(table: MilestoneTable) -> dict[frozenset, float]:
    return {s: total / count for s, (count, total) in table.items()}


def numca_values(group: Group, patterns: Sequence[str] | re.Pattern = DEFAULT_PATTERNS,
                 normalize: bool = False) -> list[ValueAssignment]:
    pattern = patterns if isinstance(patterns, re.Pattern) else compile_patterns(patterns)
    table = build_table(group, pattern)
    value = table_values(table)
    scale = advantage_scale(group, normalize)
    out = []
    for r in group.rollouts:
        vals = np.array([value[s] for s in abstract_states(r, pattern)])
        out.append(assign(r, vals, "numca", scale))
    return out
