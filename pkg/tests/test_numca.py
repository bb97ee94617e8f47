import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from statevalue.baselines import grpo_values
from statevalue.errors import ValidationError
from statevalue.numca import (abstract_states, build_table, compile_patterns, extract_milestones,
                              numca_values)

from conftest import make_group, make_rollout

F = frozenset


@pytest.mark.parametrize("text,want", [
    ("the answer is 42.", ["42"]),
    ("so 3/4 plus 0.25 gives 1", ["3/4", "0.25", "1"]),
    ("no numbers here", []),
    (r"half is \frac{1}{2} or \dfrac{2}{4}", ["1/2", "2/4"]),
    ("x = -5, y = +07, z = 007.50", ["-5", "7", "7.50"]),
])
def test_extract_milestones(text, want):
    assert extract_milestones(text) == want


def test_pattern_subset_and_unknown():
    assert extract_milestones("3/4", ["signed_integer"]) == ["3", "4"]
    with pytest.raises(ValidationError):
        compile_patterns(["roman"])
    with pytest.raises(ValidationError):
        compile_patterns([])


def _three_rollouts():
    return make_group(0, [
        make_rollout(0, 0, ["so", " 42", " done"], 1.0),
        make_rollout(1, 0, ["so", " 42", " hmm"], 0.0),
        make_rollout(2, 0, ["we", " 7", " ok"], 1.0),
    ])


def test_no_numbers_table_has_only_empty_state():
    g = make_group(0, [make_rollout(0, 0, ["a", "b"], 1.0), make_rollout(1, 0, ["c"], 0.0)])
    assert build_table(g) == {F(): (2, 1.0)}


def test_three_rollout_table():
    assert build_table(_three_rollouts()) == {F(): (3, 2.0), F({"42"}): (2, 1.0),
                                              F({"7"}): (1, 1.0)}


def test_three_rollout_values():
    vals = [a.values for a in numca_values(_three_rollouts())]
    assert np.allclose(vals[0], [2 / 3, 0.5, 0.5])
    assert np.allclose(vals[1], [2 / 3, 0.5, 0.5])
    assert np.allclose(vals[2], [2 / 3, 1.0, 1.0])


def test_repeated_milestone_counted_once():
    g = make_group(0, [make_rollout(0, 0, [" 3", " and", " 3"], 1.0)])
    states = abstract_states(g.rollouts[0], compile_patterns())
    assert states == [F({"3"})] * 3
    assert build_table(g) == {F(): (1, 1.0), F({"3"}): (1, 1.0)}


def test_milestone_split_across_tokens_activates_at_last_char():
    r = make_rollout(0, 0, [" 1", "2", " x"], 1.0)
    assert abstract_states(r, compile_patterns()) == [F(), F({"12"}), F({"12"})]


def test_revisited_state_counts_once_per_rollout():
    # {1} then {1,2}: each set enters once
    g = make_group(0, [make_rollout(0, 0, [" 1", " 2", " 1"], 0.0)])
    assert build_table(g) == {F(): (1, 0.0), F({"1"}): (1, 0.0), F({"1", "2"}): (1, 0.0)}


def test_no_numbers_equals_grpo():
    g = make_group(0, [make_rollout(i, 0, ["a", "b", "c"][: i + 1], r)
                       for i, r in enumerate([1.0, 0.0, 1.0])])
    for a, b in zip(numca_values(g), grpo_values(g)):
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.advantages, b.advantages)


def test_single_rollout_group_values_own_reward():
    g = make_group(0, [make_rollout(0, 0, ["a", " 5", " b"], 0.0)])
    (a,) = numca_values(g)
    assert np.all(a.values == 0.0) and np.all(a.advantages == 0.0)


words = st.lists(st.sampled_from(["a", " b", " 1", " 2", "3", " 4/5", " 0.5", "-"]),
                 min_size=1, max_size=8)


@settings(max_examples=100, deadline=None)
@given(rollouts=st.lists(st.tuples(words, st.sampled_from([0.0, 1.0])), min_size=1, max_size=5))
def test_numca_matches_bruteforce_mean(rollouts):
    g = make_group(0, [make_rollout(i, 0, w, r) for i, (w, r) in enumerate(rollouts)])
    pattern = compile_patterns()
    states = [abstract_states(r, pattern) for r in g.rollouts]
    for a, sts in zip(numca_values(g), states):
        for v, s in zip(a.values, sts):
            # mean reward of rollouts whose state sequence passes through s (or start, for the empty set)
            members = [r.reward for r, other in zip(g.rollouts, states) if s == F() or s in other]
            assert v == pytest.approx(sum(members) / len(members))
