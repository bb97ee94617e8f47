"""Numeric checks for the stability and bias results behind the estimators.

Identities are verified to floating-point tolerance; inequalities (which are
proven) are attacked with seeded random trials, so a failure points at the
implementation of a primitive rather than at the math.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ValidationError

REL_TOL = 1e-12


def rmsnorm(x: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    """``g * x / sqrt(mean(x**2) + eps)`` along the last axis (0 where the denominator is 0)."""
    x = np.asarray(x, dtype=np.float64)
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, np.asarray(g, dtype=np.float64) * x / safe, 0.0)


def softmax(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    z = np.exp(p - p.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def structured_softmax_aggregate(p1, reps, deltas=()):
    """Replicate/shift a score vector, softmax it, and fold the mass back.

    The first ``len(reps)`` scores of ``p1`` are copied ``reps[i]`` times, the
    remaining scores are shifted by ``deltas``. Returns ``(a1, aggregated,
    closed_form)`` where ``closed_form[i] = a1[i] * kappa[i] / sum(a1 * kappa)``
    with ``kappa = reps`` on the first block and ``exp(deltas)`` on the rest.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    reps = np.asarray(reps)
    deltas = np.asarray(deltas, dtype=np.float64)
    n2 = reps.shape[0]
    if p1.ndim != 1 or p1.size == 0:
        raise ValidationError("p1 must be a nonempty vector")
    if reps.ndim != 1 or n2 > p1.size:
        raise ValidationError("need len(reps) <= len(p1)")
    if reps.size and (not np.issubdtype(reps.dtype, np.integer) or reps.min() < 0):
        raise ValidationError("replication counts must be non-negative integers")
    if deltas.shape != (p1.size - n2,):
        raise ValidationError(f"need {p1.size - n2} deltas, got {deltas.shape[0]}")
    if reps.sum() + deltas.size == 0:
        raise ValidationError("construction has no entries")

    owner = np.concatenate([np.repeat(np.arange(n2), reps), np.arange(n2, p1.size)])
    p2 = np.concatenate([np.repeat(p1[:n2], reps), p1[n2:] + deltas])
    agg = np.bincount(owner, weights=softmax(p2), minlength=p1.size)

    a1 = softmax(p1)
    kappa = np.concatenate([reps.astype(np.float64), np.exp(deltas)])
    closed = a1 * kappa / np.dot(a1, kappa)
    return a1, agg, closed


@dataclass
class PwInstance:
    """Neighbour values, a target value and non-negative weights."""

    values: np.ndarray
    target: float
    weights: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape != self.weights.shape or self.values.size == 0:
            raise ValidationError("values and weights must be equal-length nonempty vectors")
        if np.any(self.weights < 0):
            raise ValidationError("weights must be non-negative")
        if not self.weights.mean() > 0:
            raise ValidationError("weights must have positive mean")


def _moments(values, target, weights):
    """Vectorised over leading axes: (bias_avg, bias_pw, EX, Cov(W, X), EW)."""
    X = values - target[..., None]
    W = weights
    EX = X.mean(axis=-1)
    EW = W.mean(axis=-1)
    cov = ((W - EW[..., None]) * (X - EX[..., None])).mean(axis=-1)
    bias_pw = (W * values).sum(axis=-1) / W.sum(axis=-1) - target
    bias_avg = values.mean(axis=-1) - target
    return bias_avg, bias_pw, EX, cov, EW


def pw_bias_decomposition(inst: PwInstance) -> tuple[float, float, float, float, float]:
    """Biases of the weighted and plain means plus the moments of (X, W) under a uniform index."""
    out = _moments(inst.values[None], np.array([inst.target]), inst.weights[None])
    return tuple(float(v[0]) for v in out)


def _assumption(EX, cov, EW):
    return EX * cov <= 0, np.abs(cov) <= 2 * EW * np.abs(EX)


def check_bias_corrective_weighting(inst: PwInstance) -> tuple[bool, bool]:
    """(sign condition E[X]·Cov(W,X) <= 0, magnitude condition |Cov| <= 2 E[W] |E[X]|)."""
    _, _, EX, cov, EW = pw_bias_decomposition(inst)
    sign_ok, mag_ok = _assumption(EX, cov, EW)
    return bool(sign_ok), bool(mag_ok)


def random_pw_batch(rng: np.random.Generator, size: int, n: int):
    """``size`` random instances with ``n`` neighbours: (values, target, weights)."""
    values = rng.random((size, n))
    target = rng.random(size)
    shape = rng.uniform(0.2, 3.0, size=(size, 1))
    weights = rng.random((size, n)) ** shape
    return values, target, weights


@dataclass
class OracleResult:
    kept: int
    violations: int
    rejected_magnitude: int
    witness: PwInstance | None
    max_excess: float


def bias_improvement_oracle(n_instances: int = 100_000, seed: int = 0, tol: float = REL_TOL,
                            max_n: int = 12, batch: int = 20_000) -> OracleResult:
    """Check |bias_pw| <= |bias_avg| on random instances meeting the weighting assumption.

    Instances are drawn until ``n_instances`` satisfy both conditions. A
    witness is searched among draws that satisfy the sign condition but fail
    the magnitude one, where the inequality is not guaranteed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB2]))
    kept = violations = rejected = 0
    witness = None
    max_excess = -math.inf
    while kept < n_instances:
        n = int(rng.integers(1, max_n + 1))
        values, target, weights = random_pw_batch(rng, batch, n)
        bias_avg, bias_pw, EX, cov, EW = _moments(values, target, weights)
        sign_ok, mag_ok = _assumption(EX, cov, EW)
        excess = np.abs(bias_pw) - np.abs(bias_avg)

        ok = np.flatnonzero(sign_ok & mag_ok)[: n_instances - kept]
        kept += ok.size
        if ok.size:
            violations += int((excess[ok] > tol).sum())
            max_excess = max(max_excess, float(excess[ok].max()))

        bad = np.flatnonzero(sign_ok & ~mag_ok)
        rejected += bad.size
        if witness is None:
            hits = bad[excess[bad] > tol]
            if hits.size:
                i = hits[0]
                witness = PwInstance(values[i], float(target[i]), weights[i])
    return OracleResult(kept, violations, rejected, witness, max_excess)


# ---------------------------------------------------------------- trial suites

@dataclass
class CheckResult:
    name: str
    trials: int
    violations: int
    seconds: float = 0.0
    detail: str = ""
    expect_fail: bool = False

    @property
    def passed(self) -> bool:
        return (self.violations > 0) if self.expect_fail else (self.violations == 0)


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def _by_dim(trials: int, max_d: int):
    """Split ``trials`` into near-equal chunks, one per dimension 1..max_d."""
    base, extra = divmod(trials, max_d)
    return [(d, base + (d <= extra)) for d in range(1, max_d + 1) if base + (d <= extra)]


def check_rmsnorm_lipschitz(trials: int = 100_000, seed: int = 0, max_d: int = 16) -> CheckResult:
    rng = _rng(seed, 0xA1)
    bad = 0
    for d, m in _by_dim(trials, max_d):
        scale = _log_uniform(rng, 1e-3, 1e2, (m, 1))
        x1 = rng.standard_normal((m, d)) * scale
        # half the pairs are close together, where the bound is tightest
        step = np.where(rng.random((m, 1)) < 0.5, 1e-3, 1.0) * scale
        x2 = x1 + rng.standard_normal((m, d)) * step
        g = rng.standard_normal((m, d)) * rng.uniform(0.1, 3.0, (m, 1))
        eps = _log_uniform(rng, 1e-6, 1.0, (m, 1))
        lhs = np.linalg.norm(rmsnorm_batch(x1, g, eps) - rmsnorm_batch(x2, g, eps), axis=1)
        bound = np.abs(g).max(axis=1) / np.sqrt(eps[:, 0]) * np.linalg.norm(x1 - x2, axis=1)
        bad += int((lhs > bound * (1 + REL_TOL)).sum())
    return CheckResult("rmsnorm_lipschitz", trials, bad)


def rmsnorm_batch(x: np.ndarray, g: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Row-wise RMSNorm with per-row ``eps`` (shape (m, 1))."""
    return g * x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def check_rmsnorm_magnitude(trials: int = 100_000, seed: int = 0, max_d: int = 16) -> CheckResult:
    rng = _rng(seed, 0xA2)
    bad = 0
    for d, m in _by_dim(trials, max_d):
        x = rng.standard_normal((m, d)) * _log_uniform(rng, 1e-3, 1e3, (m, 1))
        g = rng.standard_normal((m, d)) * rng.uniform(0.1, 3.0, (m, 1))
        eps = _log_uniform(rng, 1e-8, 1.0, (m, 1))
        norm = np.linalg.norm(rmsnorm_batch(x, g, eps), axis=1)
        bound = math.sqrt(d) * np.abs(g).max(axis=1)
        bad += int((norm > bound * (1 + REL_TOL)).sum())
        # equality case: unit gain, eps = 0
        unit = np.linalg.norm(rmsnorm_batch(x, np.ones(d), np.zeros((m, 1))), axis=1)
        bad += int((np.abs(unit - math.sqrt(d)) > REL_TOL * math.sqrt(d)).sum())
    return CheckResult("rmsnorm_magnitude", trials, bad)


def _softmax_pairs(rng, m, d):
    scale = _log_uniform(rng, 1e-2, 1e2, (m, 1))
    p1 = rng.standard_normal((m, d)) * scale
    step = np.where(rng.random((m, 1)) < 0.5, 1e-4, 1.0) * scale
    p2 = p1 + rng.standard_normal((m, d)) * step
    return p1, p2


def check_softmax_lipschitz(trials: int = 100_000, seed: int = 0, max_d: int = 16,
                            fn: Callable[[np.ndarray], np.ndarray] = softmax,
                            name: str = "softmax_half_lipschitz",
                            expect_fail: bool = False) -> CheckResult:
    rng = _rng(seed, 0xA3)
    bad = 0
    for d, m in _by_dim(trials, max_d):
        p1, p2 = _softmax_pairs(rng, m, d)
        lhs = np.linalg.norm(fn(p1) - fn(p2), axis=1)
        bound = 0.5 * np.linalg.norm(p1 - p2, axis=1)
        bad += int((lhs > bound * (1 + REL_TOL)).sum())
    return CheckResult(name, trials, bad, expect_fail=expect_fail)


def doubled_softmax(p: np.ndarray) -> np.ndarray:
    """Broken softmax for the self-test: logits doubled, so only 1-Lipschitz."""
    return softmax(2.0 * np.asarray(p, dtype=np.float64))


def check_softmax_bug_detected(trials: int = 100_000, seed: int = 0) -> CheckResult:
    return check_softmax_lipschitz(trials, seed, fn=doubled_softmax,
                                   name="bug_fixture_doubled_softmax", expect_fail=True)


def check_structured_softmax(trials: int = 10_000, seed: int = 0, max_len: int = 12) -> CheckResult:
    rng = _rng(seed, 0xA4)
    bad = 0
    worst = 0.0
    for _ in range(trials):
        ell = int(rng.integers(1, max_len + 1))
        n2 = int(rng.integers(0, ell + 1))
        reps = rng.integers(0, 4, size=n2)
        if reps.sum() == 0 and n2 == ell:
            reps[rng.integers(n2)] = 1
        p1 = rng.standard_normal(ell) * rng.uniform(0.1, 5.0)
        deltas = rng.standard_normal(ell - n2)
        _, agg, closed = structured_softmax_aggregate(p1, reps, deltas)
        # zero-replication coordinates must be exactly 0 on both paths
        rel = np.abs(agg - closed) / np.where(closed > 0, closed, 1.0)
        worst = max(worst, float(rel.max()))
        bad += int(rel.max() > REL_TOL)
    return CheckResult("structured_softmax_identity", trials, bad, detail=f"max rel err {worst:.2e}")


def check_bias_decomposition(trials: int = 10_000, seed: int = 0, max_n: int = 12) -> CheckResult:
    rng = _rng(seed, 0xB1)
    bad = 0
    worst = 0.0
    for n, m in _by_dim(trials, max_n):
        values, target, weights = random_pw_batch(rng, m, n)
        bias_avg, bias_pw, EX, cov, EW = _moments(values, target, weights)
        r1 = np.abs(bias_pw - (EX + cov / EW))
        r2 = np.abs(bias_avg - EX)
        worst = max(worst, float(r1.max()), float(r2.max()))
        bad += int(((r1 > REL_TOL) | (r2 > REL_TOL)).sum())
    return CheckResult("bias_decomposition", trials, bad, detail=f"max residual {worst:.2e}")


def check_bias_improvement(n_instances: int = 100_000, seed: int = 0) -> CheckResult:
    res = bias_improvement_oracle(n_instances, seed)
    # a missing witness means the search could not exercise the converse; count it as a failure
    bad = res.violations + (res.witness is None)
    detail = (f"kept {res.kept}, max excess {res.max_excess:.2e}, "
              f"witness {'found' if res.witness is not None else 'missing'}")
    return CheckResult("bias_improvement", res.kept, bad, detail=detail)


def _block_forward(X, P):
    """Pre-LN block output at the last position, plus the intermediates."""
    Xn = rmsnorm_batch(X, P["g1"], np.full((X.shape[0], 1), P["eps1"]))
    q = Xn[-1] @ P["Wq"]
    K = Xn @ P["Wk"]
    V = Xn @ P["Wv"]
    p = K @ q
    a = softmax(p)
    h = a @ V
    u = X[-1] + h @ P["Wo"]
    un = rmsnorm(u, P["g2"], P["eps2"])
    y = u + np.maximum(un @ P["W1"] + P["b1"], 0.0) @ P["W2"] + P["b2"]
    return dict(Xn=Xn, q=q, K=K, V=V, p=p, a=a, h=h, u=u, un=un, y=y)


def _spec(W):
    return float(np.linalg.norm(W, 2))


def check_composed_block(trials: int = 10_000, seed: int = 0, max_d: int = 8,
                         max_len: int = 6) -> CheckResult:
    """Chain the per-component bounds through one attention + ReLU FFN block.

    Every intermediate difference is compared with the bound built from the
    previous stage's *actual* difference (linear maps, inner products,
    softmax, attention aggregation, RMSNorm, FFN), and the final output with
    the fully propagated bound.
    """
    rng = _rng(seed, 0xA5)
    bad = 0
    slack = 1 + 1e-9
    for _ in range(trials):
        d = int(rng.integers(1, max_d + 1))
        n = int(rng.integers(1, max_len + 1))
        P = {k: rng.standard_normal((d, d)) / math.sqrt(d) for k in ("Wq", "Wk", "Wv", "Wo", "W1", "W2")}
        P.update(g1=rng.uniform(0.2, 2.0, d), g2=rng.uniform(0.2, 2.0, d),
                 eps1=float(_log_uniform(rng, 1e-3, 1.0, 1)[0]),
                 eps2=float(_log_uniform(rng, 1e-3, 1.0, 1)[0]),
                 b1=rng.standard_normal(d) * 0.1, b2=rng.standard_normal(d) * 0.1)
        X1 = rng.standard_normal((n, d))
        X2 = X1 + rng.standard_normal((n, d)) * float(_log_uniform(rng, 1e-4, 1.0, 1)[0])
        f1, f2 = _block_forward(X1, P), _block_forward(X2, P)
        S = {k: _spec(P[k]) for k in ("Wq", "Wk", "Wv", "Wo", "W1", "W2")}
        # differences far below the operands' size are pure rounding
        atol = 1e-12 * (1.0 + max(np.abs(v).max() for v in (*f1.values(), *f2.values())))

        dx = np.linalg.norm(X1 - X2, axis=1)
        c1 = np.abs(P["g1"]).max() / math.sqrt(P["eps1"])
        dxn = np.linalg.norm(f1["Xn"] - f2["Xn"], axis=1)
        ok = np.all(dxn <= c1 * dx * slack + atol)
        Bxn = c1 * dx
        # linear maps
        dq = np.linalg.norm(f1["q"] - f2["q"])
        dk = np.linalg.norm(f1["K"] - f2["K"], axis=1)
        dv = np.linalg.norm(f1["V"] - f2["V"], axis=1)
        ok &= dq <= S["Wq"] * dxn[-1] * slack + atol
        ok &= np.all(dk <= S["Wk"] * dxn * slack + atol)
        ok &= np.all(dv <= S["Wv"] * dxn * slack + atol)
        # inner products
        e_qk = max(np.linalg.norm(f1["q"]), np.linalg.norm(f2["q"]),
                   np.linalg.norm(f1["K"], axis=1).max(), np.linalg.norm(f2["K"], axis=1).max())
        dp = np.abs(f1["p"] - f2["p"])
        ok &= np.all(dp <= e_qk * (dq + dk) * slack + atol)
        # softmax
        da = np.linalg.norm(f1["a"] - f2["a"])
        ok &= da <= 0.5 * np.linalg.norm(dp) * slack + atol
        # attention aggregation
        e_v = max(np.linalg.norm(f1["V"], axis=1).max(), np.linalg.norm(f2["V"], axis=1).max())
        dh = np.linalg.norm(f1["h"] - f2["h"])
        ok &= dh <= (e_v * math.sqrt(n) * da + np.sqrt(np.sum(dv ** 2))) * slack + atol
        # residual + FFN
        du = np.linalg.norm(f1["u"] - f2["u"])
        ok &= du <= (S["Wo"] * dh + dx[-1]) * slack + atol
        c2 = np.abs(P["g2"]).max() / math.sqrt(P["eps2"])
        dy = np.linalg.norm(f1["y"] - f2["y"])
        c_ffn = S["W2"] * S["W1"] * c2
        ok &= dy <= (1 + c_ffn) * du * slack + atol

        # fully propagated bound from input differences alone
        Bq = S["Wq"] * Bxn[-1]
        Bk = S["Wk"] * Bxn
        Bv = S["Wv"] * Bxn
        Bp = e_qk * (Bq + Bk)
        Ba = 0.5 * np.linalg.norm(Bp)
        Bh = e_v * math.sqrt(n) * Ba + np.sqrt(np.sum(Bv ** 2))
        Bu = S["Wo"] * Bh + dx[-1]
        ok &= dy <= (1 + c_ffn) * Bu * slack + atol
        bad += int(not ok)
    return CheckResult("composed_block_bound", trials, bad)


SUITES: dict[str, Callable[..., CheckResult]] = {
    "rmsnorm_lipschitz": check_rmsnorm_lipschitz,
    "rmsnorm_magnitude": check_rmsnorm_magnitude,
    "softmax_half_lipschitz": check_softmax_lipschitz,
    "structured_softmax_identity": check_structured_softmax,
    "bias_decomposition": check_bias_decomposition,
    "bias_improvement": check_bias_improvement,
    "composed_block_bound": check_composed_block,
    "bug_fixture_doubled_softmax": check_softmax_bug_detected,
}


def run_suite(names=None, seed: int = 0) -> list[CheckResult]:
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValidationError(f"unknown checks {unknown}; known: {list(SUITES)}")
    out = []
    for name in names:
        t0 = time.perf_counter()
        res = SUITES[name](seed=seed)
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
