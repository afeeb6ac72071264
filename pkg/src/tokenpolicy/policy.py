"""The policy network: state encoding, Gaussian exploration, squashing, value head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .nn import Affine, AdaLayerNorm, Activation, SmallNet, checkpoint_bytes, parse_checkpoint
from .sampler import PolicyStepParams, StepDecision

TAU_MIN, TAU_MAX, W_MAX = 0.05, 4.0, 8.0
N_ACTIONS = 4
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GenerationState:
    t: int
    features: np.ndarray  # (B, F)
    tokens: np.ndarray | None = None


def encode_state(pred, v, classes, t: int) -> GenerationState:
    v = np.atleast_2d(np.asarray(v, dtype=np.int64))
    feats = np.atleast_2d(pred.features(v, classes))
    return GenerationState(t=int(t), features=feats, tokens=v)


def squash(raw, bounds=(TAU_MIN, TAU_MAX, W_MAX)) -> PolicyStepParams:
    """Map unbounded 4-vectors to valid ``(m, tau1, tau2, w)``."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw actions must be finite")
    tau_min, tau_max, w_max = bounds
    s = expit(raw)
    return PolicyStepParams(
        m=s[..., 0],
        tau1=tau_min + (tau_max - tau_min) * s[..., 1],
        tau2=tau_min + (tau_max - tau_min) * s[..., 2],
        w=w_max * s[..., 3],
    )


def gaussian_logprob(raw, mean, sigma: float) -> np.ndarray:
    """Log-density of ``N(mean, sigma^2 I)`` at ``raw``, summed over the last axis."""
    z = (np.asarray(raw) - np.asarray(mean)) / sigma
    return np.sum(-0.5 * z**2 - np.log(sigma) - 0.5 * _LOG_2PI, axis=-1)


class PolicyNet:
    """Timestep-conditioned MLP with a 4-d action-mean head and a value head.

    Both heads read the same trunk (one output affine with 5 units, zero
    initialised, so a fresh policy emits the squash midpoint and value 0).
    With ``adaptive=False`` the feature input is zeroed and actions depend
    on the timestep alone.
    """

    def __init__(self, n_features: int, T: int, hidden: int = 64, sigma: float = 0.6,
                 adaptive: bool = True, bounds=(TAU_MIN, TAU_MAX, W_MAX), seed: int = 0,
                 net: SmallNet | None = None):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.n_features, self.T, self.hidden = int(n_features), int(T), int(hidden)
        self.sigma = float(sigma)
        self.adaptive = bool(adaptive)
        self.bounds = tuple(float(b) for b in bounds)
        if net is None:
            net = SmallNet([
                Affine(self.n_features, hidden), AdaLayerNorm(hidden, self.T), Activation("tanh"),
                Affine(hidden, hidden), AdaLayerNorm(hidden, self.T), Activation("tanh"),
                Affine(hidden, N_ACTIONS + 1, zero_init=True),
            ], seed=seed)
        self.net = net

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    @params.setter
    def params(self, value):
        self.net.params = np.asarray(value, dtype=np.float64)

    def _inputs(self, features, t):
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if feats.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {feats.shape[1]}")
        if not self.adaptive:
            feats = np.zeros_like(feats)
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (feats.shape[0],))
        if np.any((t < 0) | (t >= self.T)):
            raise ValueError(f"timestep outside [0, {self.T})")
        return feats, np.eye(self.T)[t]

    def forward_trace(self, features, t):
        feats, cond = self._inputs(features, t)
        out, trace = self.net.forward_trace(feats, cond)
        return out, trace

    def outputs(self, features, t) -> tuple[np.ndarray, np.ndarray]:
        """``(action mean (B, 4), value (B,))``."""
        out, _ = self.forward_trace(features, t)
        return out[:, :N_ACTIONS], out[:, N_ACTIONS]

    def backward(self, trace, d_mean, d_value) -> np.ndarray:
        upstream = np.concatenate([d_mean, np.asarray(d_value)[:, None]], axis=1)
        return self.net.backward(trace, upstream)[0]

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.n_features, self.T, self.hidden, self.sigma, self.adaptive,
                         self.bounds, net=self.net.copy())

    def to_bytes(self) -> bytes:
        meta = {"kind": "policy", "n_features": self.n_features, "T": self.T, "hidden": self.hidden,
                "sigma": self.sigma, "adaptive": self.adaptive, "bounds": list(self.bounds)}
        return checkpoint_bytes(self.net, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PolicyNet":
        net, meta = parse_checkpoint(blob)
        if meta.get("kind") != "policy":
            raise ValueError("checkpoint does not hold a policy network")
        return cls(meta["n_features"], meta["T"], meta["hidden"], meta["sigma"], meta["adaptive"],
                   tuple(meta["bounds"]), net=net)


def act_stochastic(net: PolicyNet, state: GenerationState, rng: np.random.Generator,
                   sigma: float | None = None):
    """Sample pre-squash actions from ``N(mean, sigma^2 I)``.

    Returns ``(params, logprob (B,), raw (B, 4))``.
    """
    sigma = net.sigma if sigma is None else float(sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mean, _ = net.outputs(state.features, state.t)
    raw = mean + sigma * rng.standard_normal(mean.shape)
    return squash(raw, net.bounds), gaussian_logprob(raw, mean, sigma), raw


def act_deterministic(net: PolicyNet, state: GenerationState) -> PolicyStepParams:
    mean, _ = net.outputs(state.features, state.t)
    return squash(mean, net.bounds)


def value(net: PolicyNet, state: GenerationState) -> np.ndarray:
    return net.outputs(state.features, state.t)[1]


class PolicyProvider:
    """Adapts a :class:`PolicyNet` to the sampler's provider protocol.

    With ``group_size`` set, consecutive blocks of that many samples share
    one exploration draw (a batch-level action, used with batch rewards).
    """

    def __init__(self, net: PolicyNet, stochastic: bool = True, sigma: float | None = None,
                 group_size: int | None = None):
        self.net = net
        self.stochastic = stochastic
        self.sigma = sigma
        self.group_size = group_size

    def __call__(self, t, T, features, tokens, rng):
        if T != self.net.T:
            raise ValueError(f"policy was built for T={self.net.T}, asked for T={T}")
        mean, val = self.net.outputs(features, t)
        if not self.stochastic:
            return StepDecision(squash(mean, self.net.bounds), raw=None, logprob=None, value=val)
        sigma = self.net.sigma if self.sigma is None else self.sigma
        if self.group_size:
            n_groups = -(-mean.shape[0] // self.group_size)
            noise = np.repeat(rng.standard_normal((n_groups, N_ACTIONS)), self.group_size, axis=0)
            raw = mean + sigma * noise[: mean.shape[0]]
        else:
            raw = mean + sigma * rng.standard_normal(mean.shape)
        return StepDecision(squash(raw, self.net.bounds), raw=raw,
                            logprob=gaussian_logprob(raw, mean, sigma), value=val)
