import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from statevalue.errors import ValidationError
from statevalue.hista import (CompressedTrace, HistaParams, compress, compress_rollout,
                              hista_state_values, hista_values, min_distance,
                              prefix_distance_grid, state_values)

from conftest import make_group, make_rollout


def naive_ema(x, alpha):
    m = [x[0]]
    for row in x[1:]:
        m.append(alpha * m[-1] + (1 - alpha) * row)
    return np.array(m)


def _directed(X1, X2):
    return sum(min(np.sqrt(((a - b) ** 2).sum()) for b in X2) for a in X1)


def naive_md(X1, X2):
    if len(X1) == len(X2):
        return 0.5 * (_directed(X1, X2) + _directed(X2, X1))
    if len(X1) < len(X2):
        X1, X2 = X2, X1
    return _directed(X1, X2)


def naive_state_values(group, p):
    """Per-rollout state values from explicit prefix MinDistance and a sorted neighbour list."""
    traces = [compress_rollout(r, p) for r in group.rollouts]
    out = []
    for a, ta in enumerate(traces):
        vals = []
        for i, pa in enumerate(ta.state_positions):
            cands = []
            for b, tb in enumerate(traces):
                if b == a:
                    continue
                for j, pb in enumerate(tb.state_positions):
                    d = naive_md(ta.embeddings[:pa], tb.embeddings[:pb])
                    cands.append((max(d, p.eps_dist), tb.rollout_id, j, tb.reward))
            if not cands:
                vals.append(group.mean_reward())
                continue
            cands.sort()
            top = cands[: p.k]
            vals.append(sum(r / d for d, _, _, r in top) / sum(1 / d for d, *_ in top))
        out.append(np.array(vals))
    return out


def _trace(X, delta=1):
    X = np.asarray(X, dtype=float)
    n = X.shape[0] // delta
    return CompressedTrace(0, X, delta * np.arange(1, n + 1), 0.0)


def test_compress_identity_when_no_smoothing(rng):
    x = rng.standard_normal((7, 3))
    assert np.array_equal(compress(x, 0.0, 1), x)


def test_compress_constant_rows_fixed_point():
    x = np.tile([1.5, -2.0], (9, 1))
    for alpha in (0.0, 0.3, 0.9):
        assert np.allclose(compress(x, alpha, 2), x[:4])


def test_compress_hand_recursion():
    out = compress(np.array([[1.0], [3.0], [5.0]]), 0.5, 2)
    assert out.tolist() == [[2.0]]


@settings(max_examples=60, deadline=None)
@given(eta=st.integers(1, 30), phi=st.integers(1, 6), alpha=st.floats(0, 0.99),
       seed=st.integers(0, 2 ** 32 - 1))
def test_compress_matches_loop(eta, phi, alpha, seed):
    x = np.random.default_rng(seed).standard_normal((eta, 2))
    if eta < phi:
        with pytest.raises(ValidationError):
            compress(x, alpha, phi)
        return
    want = naive_ema(x, alpha)[phi - 1::phi][: eta // phi]
    assert np.allclose(compress(x, alpha, phi), want, atol=1e-12)


def test_min_distance_examples():
    X = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert min_distance(X, X) == 0.0
    # equal sizes: directional sums 0+1 and 0+2 are averaged
    assert min_distance([[0.0], [1.0]], [[0.0], [3.0]]) == 1.5
    assert min_distance(X, [[0.0, 0.0]]) == 1.0
    assert min_distance([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0


@settings(max_examples=60, deadline=None)
@given(n1=st.integers(1, 7), n2=st.integers(1, 7), seed=st.integers(0, 2 ** 32 - 1))
def test_min_distance_symmetric_and_naive(n1, n2, seed):
    rng = np.random.default_rng(seed)
    X1, X2 = rng.standard_normal((n1, 3)), rng.standard_normal((n2, 3))
    assert min_distance(X1, X2) == pytest.approx(min_distance(X2, X1), rel=1e-12)
    assert min_distance(X1, X2) == pytest.approx(naive_md(X1, X2), rel=1e-12)


def test_min_distance_errors():
    with pytest.raises(ValidationError):
        min_distance(np.zeros((0, 2)), np.zeros((1, 2)))
    with pytest.raises(ValidationError):
        min_distance(np.zeros((1, 2)), np.zeros((1, 3)))


def test_grid_single_state():
    A, B = _trace([[0.0, 0.0]]), _trace([[3.0, 4.0]])
    assert prefix_distance_grid(A, B).tolist() == [[5.0]]


def test_grid_six_by_six_matches_naive(rng):
    A = _trace(rng.standard_normal((6, 3)))
    B = _trace(rng.standard_normal((6, 3)))
    G = prefix_distance_grid(A, B)
    want = [[naive_md(A.embeddings[:i + 1], B.embeddings[:j + 1]) for j in range(6)]
            for i in range(6)]
    assert np.allclose(G, want, rtol=1e-5, atol=0)


def test_grid_self_diagonal_zero(rng):
    A = _trace(rng.standard_normal((8, 4)))
    assert np.all(np.diag(prefix_distance_grid(A, A)) == 0)


@settings(max_examples=80, deadline=None)
@given(na=st.integers(1, 40), nb=st.integers(1, 40), da=st.integers(1, 3), db=st.integers(1, 3),
       block=st.integers(1, 64), seed=st.integers(0, 2 ** 32 - 1))
def test_grid_blocking_and_strides(na, nb, da, db, block, seed):
    import statevalue.hista as H
    saved, H._BLOCK_CELLS = H._BLOCK_CELLS, block
    try:
        _check_grid(na, nb, da, db, seed)
    finally:
        H._BLOCK_CELLS = saved


def _check_grid(na, nb, da, db, seed):
    rng = np.random.default_rng(seed)
    A = _trace(rng.standard_normal((na, 2)), da)
    B = _trace(rng.standard_normal((nb, 2)), db)
    G = prefix_distance_grid(A, B)
    assert G.shape == (na // da, nb // db)
    for i, pa in enumerate(A.state_positions):
        for j, pb in enumerate(B.state_positions):
            assert G[i, j] == pytest.approx(naive_md(A.embeddings[:pa], B.embeddings[:pb]),
                                            rel=1e-9)


def test_inverse_distance_example():
    # query at 0; neighbour states at distance 1 (reward 1) and 3 (reward 0)
    p = HistaParams(alpha=0.0, phi=1, delta=1)
    g = make_group(0, [make_rollout(0, 0, ["q"], 0.0, hidden=[[0.0]]),
                       make_rollout(1, 0, ["a"], 1.0, hidden=[[1.0]]),
                       make_rollout(2, 0, ["b"], 0.0, hidden=[[3.0]])])
    assert state_values(g, p)[0][0] == pytest.approx(0.75)


def test_equal_distances_give_plain_mean():
    p = HistaParams(alpha=0.0, phi=1, delta=1)
    g = make_group(0, [make_rollout(0, 0, ["q"], 0.0, hidden=[[0.0]]),
                       make_rollout(1, 0, ["a"], 1.0, hidden=[[2.0]]),
                       make_rollout(2, 0, ["b"], 0.0, hidden=[[-2.0]])])
    assert state_values(g, p)[0][0] == pytest.approx(0.5)


def test_equal_rewards_give_that_reward():
    p = HistaParams(alpha=0.5, phi=1, delta=2, k=3)
    g = make_group(0, [make_rollout(i, 0, ["w"] * (3 + i), 0.4, dim=3) for i in range(4)])
    for a in hista_values(g, p):
        assert np.allclose(a.values, 0.4) and np.allclose(a.advantages, 0.0)


def test_identical_states_use_eps_floor_and_tie_break():
    # two neighbours coincide with the query: both floored to eps, k=1 keeps the lower rollout id
    p = HistaParams(alpha=0.0, phi=1, delta=1, k=1)
    g = make_group(0, [make_rollout(0, 0, ["q"], 0.0, hidden=[[0.0]]),
                       make_rollout(1, 0, ["a"], 1.0, hidden=[[0.0]]),
                       make_rollout(2, 0, ["b"], 0.0, hidden=[[0.0]])])
    assert state_values(g, p)[0][0] == 1.0


def test_spreading_and_group_mean_before_first_state():
    p = HistaParams(alpha=0.0, phi=2, delta=2, k=5)
    g = make_group(0, [make_rollout(i, 0, ["w"] * n, r, dim=2)
                       for i, (n, r) in enumerate([(9, 1.0), (3, 0.0), (5, 1.0)])])
    sv = state_values(g, p)
    vals = [a.values for a in hista_values(g, p)]
    mean = 2 / 3
    # rollout 0: states end at tokens 3 and 7
    assert np.allclose(vals[0], [mean] * 3 + [sv[0][0]] * 4 + [sv[0][1]] * 2)
    # rollout 1: too short for a state
    assert len(sv[1]) == 0 and np.allclose(vals[1], mean)
    probe = hista_state_values(g, p, [(0, 2), (0, 3), (0, 8), (1, 0)])
    assert np.allclose(probe, [mean, sv[0][0], sv[0][1], mean])


def test_hista_needs_two_rollouts():
    g = make_group(0, [make_rollout(0, 0, ["w"] * 3, 1.0)])
    with pytest.raises(ValidationError):
        hista_values(g, HistaParams(phi=1, delta=1))


def test_state_probe_validation():
    g = make_group(0, [make_rollout(i, 0, ["w"] * 3, 1.0) for i in range(2)])
    p = HistaParams(phi=1, delta=1)
    with pytest.raises(ValidationError):
        hista_state_values(g, p, [(5, 0)])
    with pytest.raises(ValidationError):
        hista_state_values(g, p, [(0, 3)])


@pytest.mark.parametrize("kw", [dict(alpha=1.0), dict(phi=0), dict(k=2.5), dict(delta=True),
                                dict(eps_dist=0), dict(metric="manhattan")])
def test_params_validation(kw):
    with pytest.raises(ValidationError):
        HistaParams(**kw)


def test_default_params():
    p = HistaParams()
    assert (p.alpha, p.phi, p.delta, p.k) == (0.7, 5, 50, 66)


@settings(max_examples=40, deadline=None)
@given(lengths=st.lists(st.integers(1, 9), min_size=2, max_size=5),
       alpha=st.sampled_from([0.0, 0.5, 0.7]), phi=st.integers(1, 2), delta=st.integers(1, 3),
       k=st.integers(1, 8), seed=st.integers(0, 2 ** 32 - 1))
def test_state_values_match_naive(lengths, alpha, phi, delta, k, seed):
    rng = np.random.default_rng(seed)
    g = make_group(0, [make_rollout(i, 0, ["w"] * n, float(rng.integers(0, 2)),
                                    hidden=rng.standard_normal((n, 2)))
                       for i, n in enumerate(lengths)])
    p = HistaParams(alpha=alpha, phi=phi, delta=delta, k=k)
    got = state_values(g, p)
    want = naive_state_values(g, p)
    for a, b in zip(got, want):
        assert np.allclose(a, b, rtol=1e-9, atol=1e-12)
