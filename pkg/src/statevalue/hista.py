"""Hidden-state based state value estimation.

Pipeline per group:

1. compress each rollout's hidden states with an EMA, keeping every
   ``phi``-th smoothed row;
2. sample states as embedding prefixes of length ``delta, 2*delta, ...``;
3. measure prefix-to-prefix MinDistance against every state of the *other*
   rollouts in the group (all prefix pairs of two rollouts come from one
   running-min / cumulative-sum sweep over their pairwise distance matrix);
4. value each state as the inverse-distance weighted mean reward of its
   ``k`` nearest neighbours.

Token ``t`` inherits the value of the last sampled state ending at or before
it; earlier tokens fall back to the group mean.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.signal import lfilter
from scipy.spatial.distance import cdist

from .errors import ValidationError
from .trace import Group, Rollout, ValueAssignment, advantage_scale, assign

METRICS = ("euclidean", "cosine")
_BLOCK_CELLS = 16384  # distance entries per slab (128 KiB)


@dataclass(frozen=True)
class HistaParams:
    alpha: float = 0.7
    phi: int = 5
    delta: int = 50
    k: int = 66
    eps_dist: float = 1e-6
    # experimental: "cosine" swaps L2 for 1 - cosine similarity (ablation only)
    metric: str = "euclidean"

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValidationError(f"alpha={self.alpha} must lie in [0, 1)")
        for name in ("phi", "delta", "k"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValidationError(f"{name}={v!r} must be an integer >= 1")
        if not self.eps_dist > 0:
            raise ValidationError("eps_dist must be positive")
        if self.metric not in METRICS:
            raise ValidationError(f"metric must be one of {METRICS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CompressedTrace:
    rollout_id: int
    embeddings: np.ndarray
    state_positions: np.ndarray
    reward: float

    @property
    def n_states(self) -> int:
        return len(self.state_positions)


def compress(hidden: np.ndarray, alpha: float, phi: int) -> np.ndarray:
    """EMA-smooth the rows of ``hidden`` and keep every ``phi``-th one.

    ``m_1 = x_1``, ``m_t = alpha*m_{t-1} + (1-alpha)*x_t``, embedding ``i`` is
    ``m_{i*phi}`` (1-based), giving ``floor(eta/phi)`` rows.
    """
    x = np.asarray(hidden, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("hidden must be a 2-D matrix")
    if phi < 1 or x.shape[0] < phi:
        raise ValidationError(f"need eta >= phi (eta={x.shape[0]}, phi={phi})")
    if alpha == 0.0:
        m = x
    else:
        m, _ = lfilter([1.0 - alpha], [1.0, -alpha], x, axis=0, zi=alpha * x[:1])
    return m[phi - 1::phi][: x.shape[0] // phi]


def compress_rollout(rollout: Rollout, params: HistaParams) -> CompressedTrace:
    """CompressedTrace with sampled prefix lengths delta, 2*delta, ...; empty if too short."""
    eta, d = rollout.hidden.shape
    if eta < params.phi:
        emb = np.zeros((0, d))
    else:
        emb = compress(rollout.hidden, params.alpha, params.phi)
    n_states = emb.shape[0] // params.delta
    positions = params.delta * np.arange(1, n_states + 1)
    return CompressedTrace(rollout.rollout_id, emb, positions, rollout.reward)


def _pairwise(X1: np.ndarray, X2: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    D = cdist(X1, X2, metric=metric)
    if metric == "cosine":
        D = np.nan_to_num(D, nan=1.0)
    return D


def min_distance(X1: np.ndarray, X2: np.ndarray, metric: str = "euclidean") -> float:
    """MinDistance: over the longer set, sum of each point's nearest distance in the other.

    For sets of equal size the two directional sums are averaged.
    """
    X1, X2 = np.atleast_2d(X1).astype(np.float64), np.atleast_2d(X2).astype(np.float64)
    if X1.shape[0] == 0 or X2.shape[0] == 0:
        raise ValidationError("MinDistance needs two nonempty point sets")
    if X1.shape[1] != X2.shape[1]:
        raise ValidationError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    D = _pairwise(X1, X2, metric)
    n1, n2 = D.shape
    if n1 != n2:
        return float(D.min(axis=1).sum() if n1 > n2 else D.min(axis=0).sum())
    # equal lengths: mean of both directions keeps MD symmetric
    return 0.5 * (float(D.min(axis=1).sum()) + float(D.min(axis=0).sum()))


def prefix_distance_grid(A: CompressedTrace, B: CompressedTrace,
                         metric: str = "euclidean") -> np.ndarray:
    """MinDistance between every sampled prefix of A and every sampled prefix of B.

    With ``D`` the embedding distance matrix, ``cummin`` along B's axis gives
    each A-point's nearest distance within every B-prefix, and ``cumsum``
    along A's axis sums those over every A-prefix (and symmetrically).
    Cost O(nA*nB*d) for all prefix pairs, with O(nB) carried state between
    row blocks of A.
    """
    if A.embeddings.shape[1] != B.embeddings.shape[1]:
        raise ValidationError("traces have different hidden dimensions")
    if A.n_states == 0 or B.n_states == 0:
        return np.zeros((A.n_states, B.n_states))
    na, nb = A.state_positions[-1], B.state_positions[-1]
    ia, ib = A.state_positions - 1, B.state_positions - 1
    XA, XB = A.embeddings[:na], B.embeddings[:nb]

    # a_cost[p, q]: sum over A-prefix p of nearest distance into B-prefix q;
    # b_cost[p, q]: sum over B-prefix q of nearest distance into A-prefix p.
    # A is swept in row blocks so only a block x nb slab of distances is live.
    out = np.empty((len(ia), len(ib)))
    a_run = np.zeros(len(ib))
    col_min = np.full(nb, np.inf)
    block = max(1, _BLOCK_CELLS // nb)
    s = 0
    for lo in range(0, na, block):
        hi = min(lo + block, na)
        D = _pairwise(XA[lo:hi], XB, metric)
        rows = np.cumsum(np.minimum.accumulate(D, axis=1)[:, ib], axis=0) + a_run
        a_run = rows[-1]
        cols = np.minimum(np.minimum.accumulate(D, axis=0), col_min)
        col_min = cols[-1]
        e = int(np.searchsorted(ia, hi))
        if e > s:
            local = ia[s:e] - lo
            a_cost = rows[local]
            b_cost = np.cumsum(cols[local], axis=1)[:, ib]
            la = ia[s:e, None]
            out[s:e] = np.where(la > ib, a_cost,
                                np.where(la < ib, b_cost, 0.5 * (a_cost + b_cost)))
            s = e
    return out


def _group_states(group: Group, params: HistaParams):
    traces = [compress_rollout(r, params) for r in group.rollouts]
    n = len(traces)
    grids: dict[tuple[int, int], np.ndarray] = {}
    for a in range(n):
        for b in range(a + 1, n):
            g = prefix_distance_grid(traces[a], traces[b], params.metric)
            grids[a, b] = g
            grids[b, a] = g.T
    return traces, grids


def _knn_value(dist: np.ndarray, rid: np.ndarray, sidx: np.ndarray, rew: np.ndarray,
               params: HistaParams) -> float:
    dist = np.maximum(dist, params.eps_dist)
    order = np.lexsort((sidx, rid, dist))[: params.k]
    w = 1.0 / dist[order]
    r = rew[order]
    # a weighted mean lies within its inputs; clip away rounding overshoot
    return float(np.clip(np.dot(w, r) / w.sum(), r.min(), r.max()))


def state_values(group: Group, params: HistaParams = HistaParams()) -> list[np.ndarray]:
    """Value of every sampled state, per rollout (same order as ``group.rollouts``)."""
    if group.group_size < 2:
        raise ValidationError(
            f"group {group.prompt_id}: Hista needs >= 2 rollouts (neighbours come from other rollouts)")
    traces, grids = _group_states(group, params)
    out = []
    for a, ta in enumerate(traces):
        vals = np.empty(ta.n_states)
        others = [b for b in range(len(traces)) if b != a and traces[b].n_states]
        if ta.n_states and not others:
            vals[:] = group.mean_reward()
            out.append(vals)
            continue
        if ta.n_states:
            dist = np.concatenate([grids[a, b] for b in others], axis=1)
            rid = np.concatenate([np.full(traces[b].n_states, traces[b].rollout_id) for b in others])
            sidx = np.concatenate([np.arange(traces[b].n_states) for b in others])
            rew = np.concatenate([np.full(traces[b].n_states, traces[b].reward) for b in others])
            for i in range(ta.n_states):
                vals[i] = _knn_value(dist[i], rid, sidx, rew, params)
        out.append(vals)
    return out


def _state_end_tokens(n_states: int, params: HistaParams) -> np.ndarray:
    """0-based index of the last token covered by each sampled state."""
    return params.delta * params.phi * np.arange(1, n_states + 1) - 1


def _spread(eta: int, svals: np.ndarray, fallback: float, params: HistaParams) -> np.ndarray:
    tokens = np.full(eta, fallback, dtype=np.float64)
    for end, v in zip(_state_end_tokens(len(svals), params), svals):
        tokens[end:] = v
    return tokens


def hista_values(group: Group, params: HistaParams = HistaParams(),
                 normalize: bool = False) -> list[ValueAssignment]:
    svals = state_values(group, params)
    mean = group.mean_reward()
    scale = advantage_scale(group, normalize)
    return [assign(r, _spread(r.eta, sv, mean, params), "hista", scale)
            for r, sv in zip(group.rollouts, svals)]


def hista_state_values(group: Group, params: HistaParams,
                       states: Sequence[tuple[int, int]]) -> np.ndarray:
    """Hista value at explicit ``(rollout_id, token_index)`` states."""
    pos = {r.rollout_id: i for i, r in enumerate(group.rollouts)}
    for rid, t in states:
        if rid not in pos:
            raise ValidationError(f"group {group.prompt_id} has no rollout {rid}")
        eta = group.rollouts[pos[rid]].eta
        if not 0 <= t < eta:
            raise ValidationError(f"rollout {rid}: token_index {t} outside [0, {eta})")
    svals = state_values(group, params)
    mean = group.mean_reward()
    out = np.empty(len(states))
    for j, (rid, t) in enumerate(states):
        sv = svals[pos[rid]]
        n_before = int(np.searchsorted(_state_end_tokens(len(sv), params), t, side="right"))
        out[j] = sv[n_before - 1] if n_before else mean
    return out
