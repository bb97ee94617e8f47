import numpy as np
import pytest

from statevalue.trace import Group, Rollout

PROMPT = ["Q", ":"]


def make_rollout(rid, pid, words, reward, hidden=None, dim=2, seed=None):
    """Rollout with a two-token prompt; random hidden rows unless given."""
    if hidden is None:
        rng = np.random.default_rng(rid if seed is None else seed)
        hidden = rng.standard_normal((len(words), dim))
    return Rollout(rid, pid, PROMPT + list(words), len(PROMPT), float(reward),
                   np.asarray(hidden, dtype=np.float32))


def make_group(pid, rollouts):
    g = Group(pid, list(rollouts))
    g.validate()
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
