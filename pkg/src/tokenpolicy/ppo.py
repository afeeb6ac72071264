"""Policy optimisation with the clipped surrogate objective.

The reward is terminal-only, so the advantage of every step is simply
``R - V(s_t)`` and the value target is ``R`` itself.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .nn import Adam, NonFiniteGradientError
from .policy import N_ACTIONS, PolicyNet, PolicyProvider, gaussian_logprob, squash
from .sampler import Trajectory, generate

log = logging.getLogger(__name__)

LOGRATIO_CLAMP = 20.0
LOG_COLUMNS = ("loop", "mean_reward", "ppo_objective", "value_loss", "disc_acc", "sigma", "toy_fid_every_k")


class NumericalAbort(RuntimeError):
    """Training stopped on a non-finite quantity (a checkpoint was dumped if possible)."""


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    value_coef: float = 0.5
    policy_lr: float = 1e-5
    policy_beta1: float = 0.9
    policy_beta2: float = 0.999
    updates_per_loop: int = 5
    batch_size: int = 256
    n_loops: int = 1000
    sigma_start: float = 0.6
    sigma_end: float = 0.3
    sigma_switch_loop: int = 500
    normalize_advantages: bool = True
    reward_lr: float = 1e-4
    reward_beta1: float = 0.5
    reward_beta2: float = 0.999
    reward_updates_per_loop: int = 5
    reward_batch_size: int = 256

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.value_coef < 0:
            raise ValueError("value_coef must be nonnegative")
        if self.batch_size < 1 or self.reward_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.sigma_start <= 0 or self.sigma_end <= 0:
            raise ValueError("sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PPO config keys: {sorted(unknown)}")
        return cls(**d)


def anneal_sigma(loop_index: int, cfg: PPOConfig | None = None) -> float:
    cfg = cfg or PPOConfig()
    return cfg.sigma_start if loop_index < cfg.sigma_switch_loop else cfg.sigma_end


def advantage(traj: Trajectory) -> np.ndarray:
    """``R - V(s_t)`` for every step, shape ``(T, B)``."""
    if traj.value is None or traj.reward is None:
        raise ValueError("trajectory needs value estimates and a terminal reward")
    return traj.reward[None, :] - traj.value


def collect(net: PolicyNet, pred, reward_fn: Callable, n: int, rng: np.random.Generator, *,
            decoder: Callable, classes=None, sigma: float | None = None,
            group_size: int | None = None) -> Trajectory | None:
    """Generate ``n`` trajectories with the stochastic policy and attach rewards.

    Trajectories whose reward is not finite are dropped (count recorded in
    ``extras["dropped"]``).  Returns ``None`` for ``n == 0``.
    """
    if n == 0:
        return None
    if classes is None:
        classes = rng.integers(0, pred.n_classes, n)
    provider = PolicyProvider(net, stochastic=True, sigma=sigma, group_size=group_size)
    tokens, traj = generate(pred, provider, net.T, classes, rng)
    reward = np.asarray(reward_fn(decoder(tokens)), dtype=np.float64)
    traj.reward = reward
    ok = np.isfinite(reward)
    if not ok.all():
        log.warning("dropping %d trajectories with non-finite reward", int((~ok).sum()))
        traj = traj.select(ok)
    traj.extras["dropped"] = int((~ok).sum())
    traj.extras["sigma"] = net.sigma if sigma is None else sigma
    return traj


def clipped_surrogate(ratio, adv, eps: float) -> np.ndarray:
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def ppo_objective(net: PolicyNet, batch: Trajectory, cfg: PPOConfig, sigma: float,
                  advantages: np.ndarray | None = None):
    """Clipped surrogate minus ``c * (V - R)^2``, averaged over steps and trajectories.

    Returns ``(objective, gradient w.r.t. net.params, info)``; the gradient
    is for ascent.  ``advantages`` defaults to ``R - V_old`` (normalised
    per batch when the config says so).
    """
    T, B = batch.T, batch.batch_size
    if advantages is None:
        advantages = advantage(batch)
        if cfg.normalize_advantages:
            advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    M = T * B
    feats = batch.features.reshape(M, -1)
    t_idx = np.repeat(np.arange(T), B)
    raw = batch.raw.reshape(M, N_ACTIONS)
    old_logp = batch.logprob.reshape(M)
    adv = np.asarray(advantages).reshape(M)
    ret = np.broadcast_to(batch.reward[None, :], (T, B)).reshape(M)

    out, trace = net.forward_trace(feats, t_idx)
    mean, val = out[:, :N_ACTIONS], out[:, N_ACTIONS]
    new_logp = gaussian_logprob(raw, mean, sigma)
    diff = new_logp - old_logp
    clamped = np.abs(diff) > LOGRATIO_CLAMP
    if clamped.any():
        log.warning("clamping %d log-ratios beyond +-%g", int(clamped.sum()), LOGRATIO_CLAMP)
        diff = np.clip(diff, -LOGRATIO_CLAMP, LOGRATIO_CLAMP)
    ratio = np.exp(diff)
    surr_unclipped = ratio * adv
    surr_clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    surrogate = np.minimum(surr_unclipped, surr_clipped)
    value_err = val - ret
    objective = float(np.mean(surrogate - cfg.value_coef * value_err**2))

    # d surrogate / d logp_new is ratio*adv where the unclipped branch is active
    active = (surr_unclipped <= surr_clipped) & ~clamped
    d_logp = np.where(active, ratio * adv, 0.0) / M
    d_mean = d_logp[:, None] * (raw - mean) / sigma**2
    d_val = -2.0 * cfg.value_coef * value_err / M
    grad = net.backward(trace, d_mean, d_val)
    info = {
        "surrogate": float(surrogate.mean()),
        "value_loss": float(np.mean(value_err**2)),
        "clip_fraction": float(np.mean(~active)),
        "ratio_mean": float(ratio.mean()),
    }
    return objective, grad, info


def ppo_update(net: PolicyNet, opt: Adam, batch: Trajectory, cfg: PPOConfig, sigma: float) -> dict:
    """``cfg.updates_per_loop`` ascent steps on the objective of one batch."""
    adv = advantage(batch)
    if cfg.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    info = {}
    for _ in range(cfg.updates_per_loop):
        obj, grad, info = ppo_objective(net, batch, cfg, sigma, advantages=adv)
        if not math.isfinite(obj):
            raise NumericalAbort("PPO objective is not finite")
        net.params = opt.step(net.params, -grad)
        info["objective"] = obj
    return info


class TrainingLog:
    """Append-only CSV; every row is flushed so a crashed run leaves a valid prefix."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    def append(self, row: dict) -> None:
        row = {k: row.get(k, "") for k in LOG_COLUMNS}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(["" if row[k] is None else row[k] for k in LOG_COLUMNS])

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] in ("", None) else float(r[name]) for r in self.rows])


def update_loop(net: PolicyNet, pred, reward_model, cfg: PPOConfig, rng: np.random.Generator, *,
                decoder: Callable, sample_real: Callable | None = None, n_loops: int | None = None,
                class_sampler: Callable | None = None, group_size: int | None = None,
                evaluate: Callable | None = None, eval_every: int = 0, log_path=None,
                checkpoint: Callable | None = None, checkpoint_every: int = 100,
                start_loop: int = 0) -> TrainingLog:
    """Alternate policy optimisation and (for adversarial rewards) discriminator updates.

    Per loop: collect a batch under the current policy, take
    ``updates_per_loop`` PPO steps, then, if ``reward_model`` has a
    ``partial_fit``, draw a fresh fake batch under the updated policy and
    take ``reward_updates_per_loop`` discriminator steps against real
    images from ``sample_real(n, rng)``.
    """
    opt = Adam(lr=cfg.policy_lr, beta1=cfg.policy_beta1, beta2=cfg.policy_beta2)
    train_log = TrainingLog(log_path)
    n_loops = cfg.n_loops if n_loops is None else n_loops
    adversarial = hasattr(reward_model, "partial_fit")
    if class_sampler is None:
        def class_sampler(n, g):
            return g.integers(0, pred.n_classes, n)
    for loop in range(start_loop, start_loop + n_loops):
        sigma = anneal_sigma(loop, cfg)
        net.sigma = sigma
        try:
            batch = collect(net, pred, reward_model, cfg.batch_size, rng, decoder=decoder,
                            classes=class_sampler(cfg.batch_size, rng), group_size=group_size)
            info = ppo_update(net, opt, batch, cfg, sigma)
            disc_acc = None
            if adversarial:
                n_fake = cfg.reward_batch_size
                fake_tokens, _ = generate(pred, PolicyProvider(net, stochastic=True), net.T,
                                          class_sampler(n_fake, rng), rng)
                fake = decoder(fake_tokens)
                real = sample_real(n_fake, rng)
                for _ in range(cfg.reward_updates_per_loop):
                    reward_model.partial_fit(real, fake)
                disc_acc = reward_model.last_accuracy_
        except (NonFiniteGradientError, FloatingPointError, NumericalAbort) as exc:
            if checkpoint is not None:
                checkpoint(f"abort_loop{loop}")
            raise NumericalAbort(f"loop {loop}: {exc}") from exc
        fid = None
        if evaluate is not None and eval_every and (loop + 1) % eval_every == 0:
            fid = evaluate()
        train_log.append({
            "loop": loop, "mean_reward": float(batch.reward.mean()), "ppo_objective": info["objective"],
            "value_loss": info["value_loss"], "disc_acc": disc_acc, "sigma": sigma, "toy_fid_every_k": fid,
        })
        if checkpoint is not None and checkpoint_every and (loop + 1) % checkpoint_every == 0:
            checkpoint(f"loop{loop + 1}")
    return train_log


def bandit_batch(net: PolicyNet, features: np.ndarray, reward_fn: Callable, n: int,
                 rng: np.random.Generator, sigma: float) -> Trajectory:
    """One-step trajectories from a fixed state; ``reward_fn`` sees the sampled actions.

    Used for sanity tasks where the reward is a known function of the
    first action (full generation would override ``m`` on its last step).
    """
    feats = np.repeat(np.atleast_2d(features), n, axis=0)
    mean, val = net.outputs(feats, 0)
    raw = mean + sigma * rng.standard_normal(mean.shape)
    params = squash(raw, net.bounds)
    reward = np.asarray(reward_fn(params), dtype=np.float64)
    return Trajectory(
        features=feats[None], actions=params.as_array(n)[None], masked_count=np.zeros((1, n), dtype=np.int64),
        classes=np.zeros(n, dtype=np.int64), tokens=np.zeros((n, 0), dtype=np.int64), raw=raw[None],
        logprob=gaussian_logprob(raw, mean, sigma)[None], value=val[None], reward=reward,
    )


def train_bandit(net: PolicyNet, features: np.ndarray, reward_fn: Callable, cfg: PPOConfig,
                 rng: np.random.Generator, n_loops: int) -> list[dict]:
    """PPO on a fixed-state one-step task; returns per-loop diagnostics."""
    opt = Adam(lr=cfg.policy_lr, beta1=cfg.policy_beta1, beta2=cfg.policy_beta2)
    history = []
    for loop in range(n_loops):
        sigma = anneal_sigma(loop, cfg)
        batch = bandit_batch(net, features, reward_fn, cfg.batch_size, rng, sigma)
        info = ppo_update(net, opt, batch, cfg, sigma)
        history.append({"loop": loop, "mean_reward": float(batch.reward.mean()), **info})
    return history
