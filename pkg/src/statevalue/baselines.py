"""Group-average (GRPO) values, Monte-Carlo means and GAE advantages."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .trace import Group, ValueAssignment, advantage_scale, assign


@dataclass(frozen=True)
class GaeParams:
    lam: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("lam", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")


def grpo_values(group: Group, normalize: bool = False) -> list[ValueAssignment]:
    """Every token of every rollout gets the group's mean reward."""
    if group.group_size == 0:
        raise ValidationError(f"group {group.prompt_id} is empty")
    mean = math.fsum(group.rewards) / group.group_size
    scale = advantage_scale(group, normalize)
    return [assign(r, np.full(r.eta, mean), "grpo", scale) for r in group.rollouts]


def mcs_values(group: Group, continuations: Mapping[tuple[int, int], Sequence[float]]
               ) -> dict[tuple[int, int], float]:
    """MCS@n: mean continuation reward per state ``(rollout_id, token_index)``."""
    out = {}
    for key, rewards in continuations.items():
        rid, t = key
        r = group.rollout(rid)
        if not 0 <= t < r.eta:
            raise ValidationError(f"rollout {rid}: token_index {t} outside [0, {r.eta})")
        if len(rewards) == 0:
            raise ValidationError(f"state {key} has no continuation rewards")
        out[key] = math.fsum(rewards) / len(rewards)
    return out


def gae_advantages(values: Sequence[float], rewards: Sequence[float],
                   params: GaeParams = GaeParams()) -> np.ndarray:
    """Generalized advantage estimates for one trajectory.

    ``values[t]`` is V(s_t) for t = 0..T-1 and V(s_T) = 0 is implied. The TD
    residual is ``r_t + gamma * V(s_{t+1}) - V(s_t)`` and the advantage is the
    (lambda*gamma)-discounted sum of residuals from t to the end.
    """
    v = np.asarray(values, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    if v.shape != r.shape or v.ndim != 1:
        raise ValidationError(f"values {v.shape} and rewards {r.shape} must be equal-length 1-D")
    nxt = np.append(v[1:], 0.0)
    delta = r + params.gamma * nxt - v
    adv = np.empty_like(delta)
    acc = 0.0
    decay = params.lam * params.gamma
    for t in range(len(delta) - 1, -1, -1):
        acc = delta[t] + decay * acc
        adv[t] = acc
    return adv
