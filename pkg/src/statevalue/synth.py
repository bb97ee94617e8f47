"""NumberChain: a seeded latent-Markov token generator with exact state values.

Generative process for one rollout of a prompt whose latent is ``z_0``::

    for t = 1 .. max_len:
        z_t ~ transition[z_{t-1}]
        x_t ~ emit[z_t]
        hidden_t = embed[z_t] + N(0, sigma^2 I)
        stop if x_t is EOS

The reward is 1 when generation stops with EOS and the most recent answer
token equals ``target_number``; truncation at ``max_len`` scores 0.

``exact_value(z, n, m)`` is the success probability when the *next* token is
emitted by latent ``z``, at most ``n`` more tokens may be generated and ``m``
is the last answer token so far. Only ``m == target`` matters, so the dynamic
programme runs over ``(n, z, hit)`` with ``hit`` boolean.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .trace import Group, Rollout

EOS = "<eos>"
LATENTS_FILE = "latents.jsonl"
ENV_FILE = "env.json"

_NUMERIC = re.compile(r"[-+]?\d+(?:[./]\d+)?")

FILLERS = ("so", "then", "we", "have", "thus", "check", "next", "wait")
DIGIT_ANSWERS = ("7", "3", "5", "12")
WORD_ANSWERS = ("seven", "three", "five", "twelve")


@dataclass
class EnvConfig:
    n_latent: int
    transition: np.ndarray
    vocab: list[str]
    emit: np.ndarray
    target_number: str
    max_len: int
    dim: int
    noise_sigma: float
    seed: int
    answer_tokens: list[str] | None = None
    start_weights: np.ndarray | None = None
    embeddings: np.ndarray | None = None
    _embed_cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.emit = np.asarray(self.emit, dtype=np.float64)
        self.vocab = list(self.vocab)
        if self.answer_tokens is None:
            self.answer_tokens = [v for v in self.vocab if _NUMERIC.fullmatch(v)]
        if self.start_weights is None:
            self.start_weights = np.full(self.n_latent, 1.0 / max(self.n_latent, 1))
        self.start_weights = np.asarray(self.start_weights, dtype=np.float64)
        if self.embeddings is not None:
            self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        K = self.n_latent
        if K < 2:
            raise ConfigError("n_latent must be >= 2")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.transition.shape != (K, K):
            raise ConfigError(f"transition must be {K}x{K}, got {self.transition.shape}")
        if np.any(self.transition < 0):
            raise ConfigError("transition has negative probabilities")
        for i, s in enumerate(self.transition.sum(axis=1)):
            if abs(s - 1.0) > 1e-9:
                raise ConfigError(f"transition row {i} sums to {float(s)!r}, expected 1")
        if EOS not in self.vocab:
            raise ConfigError(f"vocab must contain {EOS!r}")
        if len(set(self.vocab)) != len(self.vocab):
            raise ConfigError("vocab has duplicate tokens")
        if self.emit.shape != (K, len(self.vocab)):
            raise ConfigError(f"emit must be {K}x{len(self.vocab)}, got {self.emit.shape}")
        if np.any(self.emit < 0):
            raise ConfigError("emit has negative probabilities")
        for i, s in enumerate(self.emit.sum(axis=1)):
            if abs(s - 1.0) > 1e-9:
                raise ConfigError(f"emit row {i} sums to {float(s)!r}, expected 1")
        if self.target_number not in self.vocab:
            raise ConfigError(f"target_number {self.target_number!r} not in vocab")
        if self.target_number not in self.answer_tokens:
            raise ConfigError("target_number must be one of answer_tokens")
        if self.start_weights.shape != (K,) or np.any(self.start_weights < 0) \
                or abs(self.start_weights.sum() - 1.0) > 1e-9:
            raise ConfigError("start_weights must be a probability vector over latents")
        if self.embeddings is not None and self.embeddings.shape != (K, self.dim):
            raise ConfigError(f"embeddings must be {K}x{self.dim}")

    @property
    def eos_index(self) -> int:
        return self.vocab.index(EOS)

    def embed(self) -> np.ndarray:
        """K x d latent embeddings; orthonormal when K <= d, unit-norm random otherwise."""
        if self._embed_cache is not None:
            return self._embed_cache
        if self.embeddings is not None:
            E = self.embeddings
        else:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xE3BED]))
            G = rng.standard_normal((self.dim, self.n_latent))
            if self.n_latent <= self.dim:
                Q, R = np.linalg.qr(G)
                E = (Q * np.sign(np.diag(R))).T
            else:
                E = (G / np.linalg.norm(G, axis=0)).T
        diffs = E[:, None, :] - E[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1)) + np.eye(self.n_latent)
        if self.noise_sigma == 0 and dist.min() <= 1e-12:
            raise ConfigError("latent embeddings collide; with noise_sigma=0 they must be distinct")
        self._embed_cache = E
        return E

    def to_dict(self) -> dict:
        return {
            "n_latent": self.n_latent,
            "transition": self.transition.tolist(),
            "vocab": self.vocab,
            "emit": self.emit.tolist(),
            "target_number": self.target_number,
            "max_len": self.max_len,
            "dim": self.dim,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "answer_tokens": self.answer_tokens,
            "start_weights": self.start_weights.tolist(),
            "embeddings": None if self.embeddings is None else self.embeddings.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad env config: {exc}") from None


@dataclass
class LatentTrace:
    rollout_id: int
    prompt_latent: int
    latent_states: list[int]


def _branch_embeddings(n_latent: int, dim: int, spread: float,
                       rng: np.random.Generator) -> np.ndarray | None:
    """Unit embeddings where latents of one branch share a common direction.

    Row ``k`` is ``sqrt(1 - spread^2) * c_b + spread * u_k`` with ``c_b`` the
    direction of its branch (reading, target, distractor) and ``u_k`` a
    latent-specific direction, all mutually orthonormal. Same-branch latents
    sit ``spread*sqrt(2)`` apart, other pairs ``sqrt(2)``. Returns None when
    ``dim`` is too small for ``n_latent + 3`` orthonormal directions.
    """
    if n_latent + 3 > dim:
        return None
    Q, R = np.linalg.qr(rng.standard_normal((dim, n_latent + 3)))
    Q = Q * np.sign(np.diag(R))
    centers, own = Q[:, :3].T, Q[:, 3:].T
    branch = [0] + [1 if k % 2 else 2 for k in range(1, n_latent)]
    return np.sqrt(1.0 - spread ** 2) * centers[branch] + spread * own


def number_chain(n_latent: int = 6, dim: int = 16, noise_sigma: float = 0.1,
                 max_len: int = 48, numeric: bool = True, stickiness: float = 0.9,
                 cross: float = 0.005, p_answer: float = 0.4, spread: float = 0.5,
                 seed: int = 0) -> EnvConfig:
    """Build the standard NumberChain configuration.

    Latent 0 is a filler-only "reading" state. The remaining latents split
    into a target branch (odd indices), which answers only with the target,
    and a distractor branch (even indices), each latent answering with its
    own wrong number. Branch latents are sticky and leak into the other
    branch with probability ``cross``, so success is mostly decided by the
    branch a rollout commits to. With ``numeric=False`` answers are spelled
    as words and no digit is ever emitted.
    """
    if not 0.0 <= cross <= 1.0 - stickiness:
        raise ConfigError("need 0 <= cross <= 1 - stickiness")
    if not 0.0 < spread <= 1.0 or not 0.0 < p_answer < 0.92:
        raise ConfigError("need 0 < spread <= 1 and 0 < p_answer < 0.92")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    answers = DIGIT_ANSWERS if numeric else WORD_ANSWERS
    vocab = list(FILLERS) + list(answers) + [EOS]
    n_fill, n_ans = len(FILLERS), len(answers)
    K = n_latent
    good = [k for k in range(1, K) if k % 2 == 1]
    bad = [k for k in range(1, K) if k % 2 == 0]

    emit = np.zeros((K, len(vocab)))
    emit[0, :n_fill] = rng.dirichlet(np.ones(n_fill))
    for k in range(1, K):
        answer = 0 if k in good else 1 + (bad.index(k) % (n_ans - 1))
        p_eos = rng.uniform(0.04, 0.08)
        emit[k, n_fill + answer] = p_answer
        emit[k, -1] = p_eos
        emit[k, :n_fill] = (1.0 - p_eos - p_answer) * rng.dirichlet(np.ones(n_fill))

    trans = np.zeros((K, K))
    trans[0, 0] = 0.7
    branches = [b for b in (good, bad) if b]
    for branch in branches:
        trans[0, branch] = 0.3 / len(branches) * rng.dirichlet(np.ones(len(branch)))
    for k in range(1, K):
        same = [j for j in (good if k in good else bad) if j != k]
        other = bad if k in good else good
        trans[k, k] = stickiness
        if same:
            trans[k, same] = (1.0 - stickiness - cross) * rng.dirichlet(np.ones(len(same)))
        else:
            trans[k, k] += 1.0 - stickiness - cross
        if other:
            trans[k, other] = cross * rng.dirichlet(np.ones(len(other)))
        else:
            trans[k, k] += cross
    trans /= trans.sum(axis=1, keepdims=True)
    emit /= emit.sum(axis=1, keepdims=True)

    start = np.zeros(K)
    start[0] = 0.7
    start[1:] = 0.3 / (K - 1)
    return EnvConfig(n_latent=K, transition=trans, vocab=vocab, emit=emit,
                     target_number=answers[0], max_len=max_len, dim=dim,
                     noise_sigma=noise_sigma, seed=seed, answer_tokens=list(answers),
                     start_weights=start,
                     embeddings=_branch_embeddings(K, dim, spread, rng))


class ValueTable:
    """Exact DP tables for one EnvConfig.

    ``V[n, z, h]``: success probability with ``z`` emitting next, ``n`` tokens
    left, ``h`` = last answer equals target. ``Q[n, z, h]`` is the same after a
    token emitted by ``z``, averaging over the next latent.
    """

    def __init__(self, config: EnvConfig):
        self.config = config
        T, E = config.transition, config.emit
        vocab = config.vocab
        ans = set(config.answer_tokens)
        eos = config.eos_index
        is_target = np.array([v == config.target_number for v in vocab])
        is_answer = np.array([v in ans for v in vocab])
        is_filler = ~is_answer
        is_filler[eos] = False

        p_eos = E[:, eos]
        p_hit = E[:, is_target].sum(axis=1)
        p_miss = E[:, is_answer & ~is_target].sum(axis=1)
        p_fill = E[:, is_filler].sum(axis=1)

        L, K = config.max_len, config.n_latent
        V = np.zeros((L + 1, K, 2))
        Q = np.zeros((L + 1, K, 2))
        for n in range(1, L + 1):
            Q[n - 1] = T @ V[n - 1]
            for h in (0, 1):
                V[n, :, h] = (p_eos * h + p_hit * Q[n - 1, :, 1]
                              + p_miss * Q[n - 1, :, 0] + p_fill * Q[n - 1, :, h])
        Q[L] = T @ V[L]
        self.V, self.Q = V, Q

    def value(self, latent: int, steps_remaining: int, hit: bool) -> float:
        return float(self.V[steps_remaining, latent, int(hit)])

    def after(self, latent: int, steps_remaining: int, hit: bool) -> float:
        return float(self.Q[steps_remaining, latent, int(hit)])


def _hit(config: EnvConfig, last_emitted_number: str | None) -> bool:
    if last_emitted_number is None:
        return False
    tok = last_emitted_number.strip()
    if tok not in config.answer_tokens:
        raise ValidationError(f"{last_emitted_number!r} is not an answer token")
    return tok == config.target_number


def exact_value(config: EnvConfig, latent_state: int, steps_remaining: int,
                last_emitted_number: str | None, table: ValueTable | None = None) -> float:
    """Exact success probability with ``latent_state`` emitting the next token."""
    if not 0 <= latent_state < config.n_latent:
        raise ValidationError(f"latent {latent_state} out of range")
    if not 0 <= steps_remaining <= config.max_len:
        raise ValidationError(f"steps_remaining {steps_remaining} outside [0, {config.max_len}]")
    table = table or ValueTable(config)
    return table.value(latent_state, steps_remaining, _hit(config, last_emitted_number))


def prompt_value(config: EnvConfig, prompt_latent: int, table: ValueTable | None = None) -> float:
    """Exact value of the prompt state s_0."""
    table = table or ValueTable(config)
    return table.after(prompt_latent, config.max_len, False)


def exact_token_values(rollout: Rollout, latent: LatentTrace, config: EnvConfig,
                       table: ValueTable | None = None) -> np.ndarray:
    """Exact V(s_t) for each generated token t (state includes token t)."""
    gen = [tok.strip() for tok in rollout.generated_tokens]
    if len(gen) != len(latent.latent_states):
        raise ValidationError(
            f"rollout {rollout.rollout_id}: {len(gen)} tokens but {len(latent.latent_states)} latents")
    table = table or ValueTable(config)
    answers = set(config.answer_tokens)
    out = np.empty(len(gen))
    hit = False
    for t, (tok, z) in enumerate(zip(gen, latent.latent_states)):
        if tok in answers:
            hit = tok == config.target_number
        if tok == EOS:
            out[t] = float(hit)
        else:
            out[t] = table.after(z, config.max_len - (t + 1), hit)
    return out


def _draw(rng: np.random.Generator, cdf: np.ndarray) -> np.ndarray:
    """Vectorised categorical draw: one sample per row of a cumulative table."""
    u = rng.random(cdf.shape[0])
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def simulate_paths(config: EnvConfig, latents: np.ndarray, steps_remaining: np.ndarray,
                   hit: np.ndarray, rng: np.random.Generator, record: bool = False):
    """Run many continuations in lock-step from post-token states.

    Each path starts right after a token emitted by ``latents[i]`` with
    ``steps_remaining[i]`` tokens allowed. Returns terminal rewards, and when
    ``record`` is set also the per-path (latent, token index) sequences.
    """
    T_cdf = np.cumsum(config.transition, axis=1)
    E_cdf = np.cumsum(config.emit, axis=1)
    eos = config.eos_index
    is_target = np.array([v == config.target_number for v in config.vocab])
    is_answer = np.array([v in set(config.answer_tokens) for v in config.vocab])

    z = np.asarray(latents, dtype=np.int64).copy()
    left = np.asarray(steps_remaining, dtype=np.int64).copy()
    h = np.asarray(hit, dtype=bool).copy()
    n = z.shape[0]
    alive = left > 0
    reward = np.zeros(n)
    lat_hist: list[np.ndarray] = []
    tok_hist: list[np.ndarray] = []
    while alive.any():
        idx = np.flatnonzero(alive)
        z[idx] = _draw(rng, T_cdf[z[idx]])
        x = _draw(rng, E_cdf[z[idx]])
        if record:
            zs = np.full(n, -1)
            xs = np.full(n, -1)
            zs[idx], xs[idx] = z[idx], x
            lat_hist.append(zs)
            tok_hist.append(xs)
        ans = is_answer[x]
        h[idx[ans]] = is_target[x[ans]]
        stop = x == eos
        reward[idx[stop]] = h[idx[stop]].astype(float)
        left[idx] -= 1
        alive[idx[stop]] = False
        alive &= left > 0
    if record:
        return reward, np.array(lat_hist).T, np.array(tok_hist).T
    return reward


def _prompt_rng(seed: int, prompt_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, prompt_id]))


def generate_prompt(config: EnvConfig, prompt_id: int, rollouts_per_prompt: int,
                    first_rollout_id: int) -> tuple[Group, list[LatentTrace]]:
    """Generate one prompt's group from its own (seed, prompt_id) RNG stream."""
    rng = _prompt_rng(config.seed, prompt_id)
    E = config.embed()
    z0 = int(rng.choice(config.n_latent, p=config.start_weights))
    n = rollouts_per_prompt
    rewards, lat, tok = simulate_paths(
        config, np.full(n, z0), np.full(n, config.max_len), np.zeros(n, dtype=bool),
        rng, record=True)
    prompt = [f"Q{prompt_id}", ":"]
    rollouts, traces = [], []
    for i in range(n):
        steps = int((tok[i] >= 0).sum())
        zs, xs = lat[i, :steps], tok[i, :steps]
        noise = rng.standard_normal((steps, config.dim)) * config.noise_sigma
        hidden = E[zs] + noise
        words = [" " + config.vocab[x] for x in xs]
        terminal = bool(xs[-1] == config.eos_index)
        rid = first_rollout_id + i
        rollouts.append(Rollout(rid, prompt_id, prompt + words, len(prompt),
                                float(rewards[i]), hidden.astype(np.float32), terminal))
        traces.append(LatentTrace(rid, z0, [int(v) for v in zs]))
    return Group(prompt_id, rollouts), traces


def generate(config: EnvConfig, prompts: int, rollouts_per_prompt: int,
             executor=None) -> tuple[list[Group], dict[int, LatentTrace]]:
    """Generate ``prompts`` groups; identical output for serial and parallel runs."""
    if prompts < 0 or rollouts_per_prompt < 1:
        raise ValidationError("need prompts >= 0 and rollouts_per_prompt >= 1")
    config.embed()
    jobs = [(config, p, rollouts_per_prompt, p * rollouts_per_prompt) for p in range(prompts)]
    if executor is None:
        results = [generate_prompt(*job) for job in jobs]
    else:
        results = list(executor.map(lambda job: generate_prompt(*job), jobs))
    groups, latents = [], {}
    for g, traces in results:
        groups.append(g)
        for tr in traces:
            latents[tr.rollout_id] = tr
    return groups, latents


def store_latents(latents: dict[int, LatentTrace], config: EnvConfig,
                  path: str | os.PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / LATENTS_FILE, "w", encoding="utf-8") as fh:
        for rid in sorted(latents):
            tr = latents[rid]
            fh.write(json.dumps({"rollout_id": tr.rollout_id, "prompt_latent": tr.prompt_latent,
                                 "latents": tr.latent_states}) + "\n")
    with open(path / ENV_FILE, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=1)
        fh.write("\n")


def load_latents(path: str | os.PathLike) -> tuple[dict[int, LatentTrace], EnvConfig]:
    path = Path(path)
    if not (path / LATENTS_FILE).is_file() or not (path / ENV_FILE).is_file():
        raise ConfigError(f"{path} lacks {LATENTS_FILE}/{ENV_FILE} sidecars")
    latents = {}
    with open(path / LATENTS_FILE, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                latents[rec["rollout_id"]] = LatentTrace(
                    rec["rollout_id"], rec["prompt_latent"], rec["latents"])
    with open(path / ENV_FILE, encoding="utf-8") as fh:
        config = EnvConfig.from_dict(json.load(fh))
    return latents, config


def state_after(rollout: Rollout, latent: LatentTrace, config: EnvConfig,
                token_index: int) -> tuple[int, int, bool, bool]:
    """(latent, steps_remaining, hit, finished) right after generated token ``token_index``."""
    gen = [tok.strip() for tok in rollout.generated_tokens[:token_index + 1]]
    hit = False
    for tok in gen:
        if tok in config.answer_tokens:
            hit = tok == config.target_number
    finished = gen[-1] == EOS
    return latent.latent_states[token_index], config.max_len - (token_index + 1), hit, finished


def mc_state_values(config: EnvConfig, states: Sequence[tuple[int, int, bool, bool]], n: int,
                    rng: np.random.Generator) -> np.ndarray:
    """MCS@n estimates: mean terminal reward of ``n`` fresh continuations per state."""
    if n < 1:
        raise ValidationError("MCS needs n >= 1 continuations")
    m = len(states)
    if m == 0:
        return np.zeros(0)
    z = np.repeat([s[0] for s in states], n)
    left = np.repeat([0 if s[3] else s[1] for s in states], n)
    h = np.repeat([s[2] for s in states], n)
    rewards = simulate_paths(config, z, left, h, rng)
    finished = np.repeat([s[3] for s in states], n)
    rewards[finished] = h[finished].astype(float)
    return rewards.reshape(m, n).mean(axis=1)
