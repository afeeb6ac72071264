"""Parallel decoding with re-masking, driven by a per-step policy.

All step functions work on batches: tokens ``(B, N)``, logits
``(B, N, K)``, and per-sample step parameters of shape ``(B,)`` (scalars
broadcast).  ``MASK`` (-1) marks undecided positions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.special import log_softmax

from .backbone import NULL_CLASS
from .world import MASK

TAU_FLOOR = 1e-6
_RATIO_DECIMALS = 12


@dataclass
class PolicyStepParams:
    """Per-step generation policy ``(m, tau1, tau2, w)``; fields may be arrays."""

    m: np.ndarray | float
    tau1: np.ndarray | float
    tau2: np.ndarray | float
    w: np.ndarray | float

    def validate(self) -> "PolicyStepParams":
        m, t1, t2, w = (np.asarray(x, dtype=np.float64) for x in (self.m, self.tau1, self.tau2, self.w))
        for name, arr in (("m", m), ("tau1", t1), ("tau2", t2), ("w", w)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        if np.any((m < 0) | (m > 1)):
            raise ValueError("re-masking ratio m must lie in [0, 1]")
        if np.any(t1 <= 0) or np.any(t2 <= 0):
            raise ValueError("temperatures must be positive")
        if np.any(w < 0):
            raise ValueError("guidance scale w must be nonnegative")
        return self

    def as_array(self, batch: int) -> np.ndarray:
        """``(batch, 4)`` array of (m, tau1, tau2, w)."""
        return np.stack([np.broadcast_to(np.asarray(x, dtype=np.float64), (batch,))
                         for x in (self.m, self.tau1, self.tau2, self.w)], axis=1)


@dataclass
class ScheduleConfig:
    """Hand-designed schedules: cosine re-masking, constant tau1, linear tau2 and w."""

    T: int = 4
    lam: float = 1.0
    k: float = 3.0
    tau1: float = 1.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.lam < 0 or self.k < 0:
            raise ValueError("lam and k must be nonnegative")


def static_schedule(cfg: ScheduleConfig, t: int) -> PolicyStepParams:
    if not 0 <= t < cfg.T:
        raise ValueError(f"step {t} outside [0, {cfg.T})")
    T = cfg.T
    return PolicyStepParams(
        m=0.0 if t == T - 1 else math.cos(math.pi * (t + 1) / (2 * T)),
        tau1=cfg.tau1,
        tau2=max(cfg.lam * (T - t) / T, TAU_FLOOR),
        w=cfg.k * (t + 1) / T,
    )


def n_masked_for(m, n_tokens: int) -> np.ndarray:
    """Exact ``ceil(m * N)`` with ``m`` rounded to 12 decimals first."""
    scaled = np.rint(np.asarray(m, dtype=np.float64) * 10**_RATIO_DECIMALS).astype(np.int64)
    return -((-scaled * n_tokens) // 10**_RATIO_DECIMALS)


def cfg_logits(l_cond, l_uncond, w) -> np.ndarray:
    l_cond = np.asarray(l_cond, dtype=np.float64)
    l_uncond = np.asarray(l_uncond, dtype=np.float64)
    if l_cond.shape != l_uncond.shape:
        raise ValueError(f"logit shapes differ: {l_cond.shape} vs {l_uncond.shape}")
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("guidance scale must be nonnegative")
    if w.ndim == 1 and l_cond.ndim == 3:
        w = w[:, None, None]
    return l_cond + w * (l_cond - l_uncond)


def parallel_decode(v, logits, tau1, rng: np.random.Generator):
    """Sample every MASK position from ``softmax(logits / tau1)``.

    Returns ``(v_hat, confidence)``; confidence is the log-probability of
    the chosen token under the *unscaled* logits, ``+inf`` where ``v`` was
    already decided.
    """
    v = np.asarray(v)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    logits = np.asarray(logits, dtype=np.float64).reshape(v.shape + (-1,))
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    tau1 = np.asarray(tau1, dtype=np.float64)
    if np.any(tau1 <= 0):
        raise ValueError("tau1 must be positive")
    if tau1.ndim == 1:
        tau1 = tau1[:, None, None]
    masked = v == MASK
    g = rng.gumbel(size=logits.shape)
    sampled = np.argmax(logits / tau1 + g, axis=-1)
    v_hat = np.where(masked, sampled, v)
    logp = log_softmax(logits, axis=-1)
    chosen = np.take_along_axis(logp, np.maximum(v_hat, 0)[..., None], axis=-1)[..., 0]
    conf = np.where(masked, chosen, np.inf)
    return (v_hat[0], conf[0]) if single else (v_hat, conf)


@dataclass
class StepOutcome:
    tokens: np.ndarray
    guess: np.ndarray
    confidence: np.ndarray
    keep: np.ndarray
    n_remasked: np.ndarray


def remask(v_hat, confidence, m, tau2, rng: np.random.Generator) -> StepOutcome:
    """Keep a Gumbel-top-k subset of the guess and re-mask the rest.

    The keep count is ``N - ceil(m N)``, raised to the number of
    previously committed (``+inf``) positions so those are never undone.
    """
    v_hat = np.atleast_2d(np.asarray(v_hat))
    conf = np.atleast_2d(np.asarray(confidence, dtype=np.float64))
    B, N = v_hat.shape
    m = np.broadcast_to(np.asarray(m, dtype=np.float64), (B,))
    tau2 = np.broadcast_to(np.asarray(tau2, dtype=np.float64), (B,))
    if np.any((m < 0) | (m > 1)):
        raise ValueError("m must lie in [0, 1]")
    if np.any(tau2 <= 0):
        raise ValueError("tau2 must be positive")
    committed = np.isposinf(conf)
    keep_count = np.maximum(N - n_masked_for(m, N), committed.sum(axis=1))
    scores = np.where(committed, np.inf, conf + tau2[:, None] * rng.gumbel(size=(B, N)))
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(N)[None, :].repeat(B, axis=0), axis=1)
    keep = ranks < keep_count[:, None]
    tokens = np.where(keep, v_hat, MASK)
    return StepOutcome(tokens, v_hat, conf, keep, (~keep).sum(axis=1))


# -- full generation --------------------------------------------------------


@dataclass
class StepDecision:
    """What a policy provider returns for one step of a batch."""

    params: PolicyStepParams
    raw: np.ndarray | None = None  # (B, 4) pre-squash actions
    logprob: np.ndarray | None = None  # (B,)
    value: np.ndarray | None = None  # (B,)


class PolicyProvider(Protocol):
    def __call__(self, t: int, T: int, features: np.ndarray, tokens: np.ndarray,
                 rng: np.random.Generator) -> StepDecision: ...


class StaticProvider:
    """Provider that replays a hand-designed schedule for every sample."""

    stochastic = False

    def __init__(self, cfg: ScheduleConfig | None = None):
        self.cfg = cfg or ScheduleConfig()

    def __call__(self, t, T, features, tokens, rng):
        cfg = self.cfg if self.cfg.T == T else ScheduleConfig(T, self.cfg.lam, self.cfg.k, self.cfg.tau1)
        return StepDecision(static_schedule(cfg, t))


class ConstantProvider:
    """Same fixed parameters at every step (tests and baselines)."""

    stochastic = False

    def __init__(self, params: PolicyStepParams):
        self.params = params

    def __call__(self, t, T, features, tokens, rng):
        return StepDecision(self.params)


@dataclass
class Trajectory:
    """Per-step record of a batch of generations, time-major ``(T, B, ...)``."""

    features: np.ndarray
    actions: np.ndarray  # (T, B, 4) applied (m, tau1, tau2, w), m after the final-step override
    masked_count: np.ndarray  # (T, B)
    classes: np.ndarray  # (B,)
    tokens: np.ndarray  # (B, N) final
    raw: np.ndarray | None = None
    logprob: np.ndarray | None = None
    value: np.ndarray | None = None
    reward: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def batch_size(self) -> int:
        return self.actions.shape[1]

    def select(self, idx) -> "Trajectory":
        """Sub-batch of trajectories ``idx`` (boolean mask or indices)."""
        def take(a, axis=1):
            return None if a is None else np.take(a, np.flatnonzero(idx) if np.asarray(idx).dtype == bool
                                                   else idx, axis=axis)
        return Trajectory(
            features=take(self.features), actions=take(self.actions), masked_count=take(self.masked_count),
            classes=take(self.classes, 0), tokens=take(self.tokens, 0), raw=take(self.raw),
            logprob=take(self.logprob), value=take(self.value), reward=take(self.reward, 0),
        )

    def rows(self):
        """One dict per (sample, step) with the dump fields."""
        for b in range(self.batch_size):
            for t in range(self.T):
                m, tau1, tau2, w = self.actions[t, b]
                yield {
                    "sample": b, "t": t, "m": m, "tau1": tau1, "tau2": tau2, "w": w,
                    "masked_count": int(self.masked_count[t, b]),
                    "logprob": "" if self.logprob is None else self.logprob[t, b],
                    "value": "" if self.value is None else self.value[t, b],
                }

    def to_csv(self, path) -> None:
        fields = ["sample", "t", "m", "tau1", "tau2", "w", "masked_count", "logprob", "value"]
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                                 for k, v in row.items()})


def generate(pred, provider, T: int, classes, rng: np.random.Generator, batch_size: int | None = None):
    """Run ``T`` decode-and-remask steps from the all-MASK canvas.

    ``classes`` is a scalar (with ``batch_size``) or a per-sample array.
    Returns ``(tokens (B, N), Trajectory)``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    classes = np.asarray(classes, dtype=np.int64)
    if classes.ndim == 0:
        classes = np.full(1 if batch_size is None else batch_size, int(classes))
    B, N = classes.shape[0], pred.n_tokens
    v = np.full((B, N), MASK, dtype=np.int64)
    null = np.full(B, NULL_CLASS)
    feats, actions, counts = [], np.empty((T, B, 4)), np.empty((T, B), dtype=np.int64)
    raws, logps, values = [], [], []
    for t in range(T):
        both, f = pred.logits_and_features(np.vstack([v, v]), np.concatenate([classes, null]))
        l_cond, l_unc, f = both[:B], both[B:], f[:B]
        decision = provider(t, T, f, v, rng)
        p = decision.params
        if t == T - 1:
            p = PolicyStepParams(np.zeros(B), p.tau1, p.tau2, p.w)
        p.validate()
        arr = p.as_array(B)
        guided = cfg_logits(l_cond, l_unc, arr[:, 3])
        v_hat, conf = parallel_decode(v, guided, arr[:, 1], rng)
        out = remask(v_hat, conf, arr[:, 0], arr[:, 2], rng)
        v = out.tokens
        feats.append(f)
        actions[t] = arr
        counts[t] = (v == MASK).sum(axis=1)
        raws.append(decision.raw)
        logps.append(decision.logprob)
        values.append(decision.value)
    stochastic = all(r is not None for r in raws)
    traj = Trajectory(
        features=np.stack(feats), actions=actions, masked_count=counts, classes=classes, tokens=v,
        raw=np.stack(raws) if stochastic else None,
        logprob=np.stack(logps) if all(x is not None for x in logps) else None,
        value=np.stack(values) if all(x is not None for x in values) else None,
    )
    return v, traj
