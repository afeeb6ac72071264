"""Estimator wrapping a frozen backbone with a learned or fixed decoding policy."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import FeatureEmbedding, diversity_from_features, frechet_distance, stats_from_features
from .policy import PolicyNet, PolicyProvider
from .ppo import PPOConfig, update_loop
from .reward import Discriminator, ExternalScorer, FIDBatchReward
from .sampler import ScheduleConfig, StaticProvider, generate
from .world import decode_tokens

log = logging.getLogger(__name__)

POLICY_MODES = ("adaptive", "learnable-non-adaptive", "static-cosine", "static-custom")
REWARD_KINDS = ("adversarial", "fid-batch", "external")


def check_tokens(X, y, n_tokens: int, codebook_size: int, n_classes: int):
    """Validate a labelled batch of complete token sequences."""
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[1] != n_tokens:
        raise ValueError(f"X must have shape (n, {n_tokens}), got {X.shape}")
    if not np.issubdtype(X.dtype, np.integer):
        raise ValueError("token sequences must be integers")
    if np.any((X < 0) | (X >= codebook_size)):
        raise ValueError(f"tokens must lie in [0, {codebook_size})")
    if y.shape != (X.shape[0],):
        raise ValueError("y must hold one class per sequence")
    if np.any((y < 0) | (y >= n_classes)):
        raise ValueError(f"classes must lie in [0, {n_classes})")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 reference sequences")
    return X.astype(np.int64), y.astype(np.int64)


def validate_mode(policy_mode: str, reward: str) -> None:
    if policy_mode not in POLICY_MODES:
        raise ValueError(f"policy_mode must be one of {POLICY_MODES}, got {policy_mode!r}")
    if reward not in REWARD_KINDS:
        raise ValueError(f"reward must be one of {REWARD_KINDS}, got {reward!r}")
    if reward == "fid-batch" and policy_mode == "adaptive":
        # a batch-level reward cannot credit per-sample adaptive actions
        raise ValueError("fid-batch reward requires a non-adaptive policy")


class AdaptiveDecodingPolicy(BaseEstimator):
    """Decoding policy for a frozen masked-token backbone.

    ``fit(X, y)`` takes real token sequences with their classes: they
    define the reference images for the discriminator and for toy-FID.
    Static modes skip training entirely.

    Parameters
    ----------
    backbone : fitted predictor exposing ``logits_and_features``.
    codebook : patch table used to render tokens.
    ppo : dict of :class:`PPOConfig` overrides.
    group_size : samples sharing one exploration draw (fid-batch only).
    """

    def __init__(self, backbone=None, codebook=None, grid=None, n_steps=4, policy_mode="adaptive",
                 reward="adversarial", schedule_lam=1.0, schedule_k=3.0, schedule_tau1=1.0,
                 hidden=64, ppo=None, n_loops=None, group_size=32, external_hook=None, disc_objective="bce",
                 eval_every=0, n_eval=1000, log_path=None, checkpoint_dir=None, random_state=0):
        self.backbone = backbone
        self.codebook = codebook
        self.grid = grid
        self.n_steps = n_steps
        self.policy_mode = policy_mode
        self.reward = reward
        self.schedule_lam = schedule_lam
        self.schedule_k = schedule_k
        self.schedule_tau1 = schedule_tau1
        self.hidden = hidden
        self.ppo = ppo
        self.n_loops = n_loops
        self.group_size = group_size
        self.external_hook = external_hook
        self.disc_objective = disc_objective
        self.eval_every = eval_every
        self.n_eval = n_eval
        self.log_path = log_path
        self.checkpoint_dir = checkpoint_dir
        self.random_state = random_state

    # -- helpers -----------------------------------------------------------

    def _decode(self, tokens):
        return decode_tokens(tokens, self.codebook, self.grid)

    def _schedule(self) -> ScheduleConfig:
        if self.policy_mode == "static-cosine":
            return ScheduleConfig(T=self.n_steps)
        return ScheduleConfig(T=self.n_steps, lam=self.schedule_lam, k=self.schedule_k, tau1=self.schedule_tau1)

    def _sample_classes(self, n, rng):
        return rng.choice(self.classes_, size=n, p=self.class_prior_)

    def _build_reward(self, real_images, seed):
        if self.reward == "adversarial":
            n_pixels = int(np.prod(real_images.shape[1:]))
            return Discriminator(n_pixels=n_pixels, learning_rate=self.ppo_config_.reward_lr,
                                 beta1=self.ppo_config_.reward_beta1, beta2=self.ppo_config_.reward_beta2,
                                 objective=self.disc_objective, random_state=seed)
        if self.reward == "fid-batch":
            return FIDBatchReward(self.ref_stats_, self.embedder_, group_size=self.group_size)
        if self.external_hook is None:
            raise ValueError("external reward needs external_hook")
        return ExternalScorer(self.external_hook)

    def _checkpoint(self, tag):
        if not self.checkpoint_dir:
            return
        out = Path(self.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"policy_{tag}.ckpt").write_bytes(self.policy_.to_bytes())
        if isinstance(self.reward_model_, Discriminator):
            (out / f"disc_{tag}.ckpt").write_bytes(self.reward_model_.to_bytes())

    # -- estimator API -----------------------------------------------------

    def prepare(self, X, y):
        """Fit the reference statistics only (no policy training)."""
        validate_mode(self.policy_mode, self.reward)
        if self.backbone is None or self.codebook is None:
            raise ValueError("backbone and codebook are required")
        bb = self.backbone
        X, y = check_tokens(X, y, bb.n_tokens, bb.codebook_size, bb.n_classes)
        self.classes_, counts = np.unique(y, return_counts=True)
        self.class_prior_ = counts / counts.sum()
        self.reference_tokens_ = X
        self.reference_images_ = self._decode(X)
        self.embedder_ = FeatureEmbedding().fit(self.reference_images_[:1])
        self.ref_features_ = self.embedder_.transform(self.reference_images_)
        self.ref_stats_ = stats_from_features(self.ref_features_)
        self.ppo_config_ = PPOConfig.from_dict(dict(self.ppo or {}))
        self.policy_ = None
        self.reward_model_ = None
        self.log_ = None
        return self

    def load_policy(self, blob: bytes):
        """Attach a saved policy network (after :meth:`prepare`)."""
        check_is_fitted(self, "ref_stats_")
        net = PolicyNet.from_bytes(blob)
        if net.T != self.n_steps or net.n_features != self.backbone.n_features:
            raise ValueError("saved policy does not match this backbone and step count")
        if net.adaptive != (self.policy_mode == "adaptive"):
            raise ValueError(f"saved policy does not match policy_mode={self.policy_mode!r}")
        self.policy_ = net
        return self

    def fit(self, X, y):
        self.prepare(X, y)
        if self.policy_mode.startswith("static"):
            return self
        bb = self.backbone
        real_images = self.reference_images_
        rng = np.random.default_rng(self.random_state)
        seeds = rng.integers(2**31, size=2)
        self.policy_ = PolicyNet(bb.n_features, self.n_steps, hidden=self.hidden,
                                 sigma=self.ppo_config_.sigma_start,
                                 adaptive=self.policy_mode == "adaptive", seed=int(seeds[0]))
        self.reward_model_ = self._build_reward(real_images, int(seeds[1]))
        group = self.group_size if self.reward == "fid-batch" else None

        def sample_real(n, g):
            return real_images[g.integers(0, len(real_images), n)]

        def evaluate():
            return self.toy_fid(self.n_eval, random_state=self.random_state)

        self.log_ = update_loop(
            self.policy_, bb, self.reward_model_, self.ppo_config_, rng,
            decoder=self._decode, sample_real=sample_real, n_loops=self.n_loops,
            class_sampler=self._sample_classes, group_size=group, evaluate=evaluate,
            eval_every=self.eval_every, log_path=self.log_path, checkpoint=self._checkpoint,
        )
        return self

    def provider(self):
        check_is_fitted(self, "ref_stats_")
        if self.policy_ is None:
            return StaticProvider(self._schedule())
        return PolicyProvider(self.policy_, stochastic=False)

    def sample(self, n, classes=None, random_state=None, return_trajectory=False):
        """Generate ``n`` token sequences with the deterministic policy."""
        check_is_fitted(self, "ref_stats_")
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        if classes is None:
            classes = self._sample_classes(n, rng)
        tokens, traj = generate(self.backbone, self.provider(), self.n_steps, classes, rng,
                                batch_size=n)
        return (tokens, traj) if return_trajectory else tokens

    def predict(self, classes, random_state=None):
        """One generated sequence per requested class."""
        classes = np.asarray(classes, dtype=np.int64)
        return self.sample(classes.shape[0], classes=classes, random_state=random_state)

    def sample_images(self, n, classes=None, random_state=None):
        return self._decode(self.sample(n, classes, random_state))

    def evaluate(self, n=None, random_state=None) -> dict:
        """Toy-FID against the reference set and feature diversity of ``n`` samples."""
        n = self.n_eval if n is None else n
        feats = self.embedder_.transform(self.sample_images(n, random_state=random_state))
        return {
            "toy_fid": frechet_distance(stats_from_features(feats), self.ref_stats_),
            "diversity": diversity_from_features(feats),
        }

    def toy_fid(self, n=None, random_state=None) -> float:
        return self.evaluate(n, random_state)["toy_fid"]

    def score(self, X=None, y=None) -> float:
        """Negative toy-FID (higher is better)."""
        return -self.toy_fid()
