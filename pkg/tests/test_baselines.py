import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from statevalue.baselines import GaeParams, gae_advantages, grpo_values, mcs_values
from statevalue.errors import ValidationError

from conftest import make_group, make_rollout


def naive_gae(values, rewards, lam, gamma):
    """Double loop over TD residuals with V(s_T) = 0."""
    T = len(values)
    v = list(values) + [0.0]
    out = []
    for t in range(T):
        total = 0.0
        for l in range(T - t):
            delta = rewards[t + l] + gamma * v[t + l + 1] - v[t + l]
            total += (lam * gamma) ** l * delta
        out.append(total)
    return np.array(out)


def _group(rewards, lengths=None):
    lengths = lengths or [3] * len(rewards)
    return make_group(0, [make_rollout(i, 0, ["w"] * n, r)
                          for i, (r, n) in enumerate(zip(rewards, lengths))])


def test_grpo_two_point():
    out = grpo_values(_group([1.0, 0.0]))
    assert all(np.all(a.values == 0.5) for a in out)
    assert [a.advantages[0] for a in out] == [0.5, -0.5]


def test_grpo_equal_rewards_zero_advantage():
    out = grpo_values(_group([0.3] * 4, [1, 2, 3, 4]))
    assert all(np.all(a.advantages == 0) for a in out)
    assert [len(a.values) for a in out] == [1, 2, 3, 4]


def test_grpo_five_rollouts():
    out = grpo_values(_group([1, 1, 0, 0, 0]))
    assert all(np.all(a.values == 0.4) for a in out)


def test_grpo_normalize_divides_by_std():
    out = grpo_values(_group([1.0, 0.0]), normalize=True)
    assert out[0].advantages[0] == pytest.approx(0.5 / (0.5 + 1e-6))


def test_mcs_means():
    g = _group([1.0, 0.0])
    assert mcs_values(g, {(0, 1): [1]}) == {(0, 1): 1.0}
    assert mcs_values(g, {(1, 0): [1, 0]}) == {(1, 0): 0.5}
    with pytest.raises(ValidationError):
        mcs_values(g, {(0, 3): [1]})
    with pytest.raises(ValidationError):
        mcs_values(g, {(0, 0): []})


def test_gae_telescoping_cases():
    T = 6
    r = np.zeros(T)
    r[-1] = 1.0
    assert np.array_equal(gae_advantages(np.zeros(T), r, GaeParams(1.0, 1.0)), np.ones(T))
    c = 0.37
    out = gae_advantages(np.full(T, c), r, GaeParams(1.0, 1.0))
    assert np.allclose(out, 1.0 - c, atol=1e-15)


def test_gae_length_seven_matches_naive(rng):
    v, r = rng.random(7), rng.random(7)
    assert np.allclose(gae_advantages(v, r, GaeParams(0.95, 1.0)), naive_gae(v, r, 0.95, 1.0),
                       atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(T=st.integers(1, 32), lam=st.floats(0, 1), gamma=st.floats(0, 1),
       seed=st.integers(0, 2 ** 32 - 1))
def test_gae_property(T, lam, gamma, seed):
    rng = np.random.default_rng(seed)
    v, r = rng.random(T), rng.random(T)
    assert np.allclose(gae_advantages(v, r, GaeParams(lam, gamma)), naive_gae(v, r, lam, gamma),
                       rtol=0, atol=1e-10)


def test_gae_validation():
    with pytest.raises(ValidationError):
        GaeParams(lam=1.5)
    with pytest.raises(ValidationError):
        gae_advantages([0.1, 0.2], [0.0])
