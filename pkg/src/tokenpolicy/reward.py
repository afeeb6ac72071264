"""Reward models: adversarial discriminator, batch Frechet reward, external scorers.

Every reward object is a callable ``images (B, H, W, C) -> rewards (B,)``
with a ``kind`` tag.  Only the discriminator is trained; it is updated by
the caller between policy updates.
"""

from __future__ import annotations

import struct
import subprocess
from typing import Callable

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from .metrics import FeatureEmbedding, GaussianStats, frechet_distance, stats_from_features
from .nn import Adam, checkpoint_bytes, mlp, parse_checkpoint

SCORE_CLAMP = 1e-7
DISC_OBJECTIVES = ("bce", "literal")


class RewardUnavailableError(RuntimeError):
    """An external scorer failed to produce a reward."""


def _flat(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(images.shape[0], -1)


def disc_loss(fake_scores, real_scores) -> float:
    """``mean(log fake) + mean(log(1 - real))``, minimised by the discriminator."""
    fake = np.asarray(fake_scores, dtype=np.float64)
    real = np.asarray(real_scores, dtype=np.float64)
    if fake.size == 0 or real.size == 0:
        raise ValueError("discriminator loss needs nonempty batches")
    fake = np.clip(fake, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    real = np.clip(real, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return float(np.log(fake).mean() + np.log1p(-real).mean())


class Discriminator(BaseEstimator):
    """MLP on flattened pixels producing the probability that an image is real.

    ``objective`` picks what the optimizer descends.  ``"literal"`` is
    :func:`disc_loss` itself; its fake-side gradient ``1 - r`` vanishes
    exactly when fakes are scored as real, and with a shared network the
    real-side term then drives every score into the clamp, where all
    gradients are zero.  ``"bce"`` (default) descends the usual
    cross-entropy ``-log r(real) - log(1 - r(fake))``, which has the same
    target (fakes to 0, reals to 1) without that dead zone.
    :func:`disc_loss` is reported either way.
    """

    kind = "adversarial"

    def __init__(self, n_pixels=768, hidden=(128, 128), learning_rate=1e-4, beta1=0.5, beta2=0.999,
                 objective="bce", zero_init=False, random_state=0):
        self.n_pixels = n_pixels
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.objective = objective
        self.zero_init = zero_init
        self.random_state = random_state

    def _initialize(self):
        if not hasattr(self, "net_"):
            seed = int(np.random.default_rng(self.random_state).integers(2**31))
            self.net_ = mlp(self.n_pixels, list(self.hidden), 1, activation="silu",
                            zero_last=self.zero_init, seed=seed)
        if not hasattr(self, "optimizer_"):
            self.optimizer_ = Adam(lr=self.learning_rate, beta1=self.beta1, beta2=self.beta2)
        return self

    def logits(self, images) -> np.ndarray:
        self._initialize()
        x = _flat(images)
        if x.shape[1] != self.n_pixels:
            raise ValueError(f"expected images with {self.n_pixels} values, got {x.shape[1]}")
        return self.net_.forward(x - 0.5)[:, 0]

    def score(self, images) -> np.ndarray:
        """Probability of being real, in (0, 1)."""
        return expit(self.logits(images))

    __call__ = score

    def score_gradient(self, image) -> np.ndarray:
        """Gradient of the score of one image w.r.t. the parameters."""
        self._initialize()
        x = _flat(np.asarray(image)[None]) - 0.5
        out, trace = self.net_.forward_trace(x)
        s = expit(out[0, 0])
        return self.net_.backward(trace, np.array([[s * (1.0 - s)]]))[0]

    def loss_and_grad(self, real, fake):
        """``(disc_loss, gradient of the training objective, accuracy)``."""
        if self.objective not in DISC_OBJECTIVES:
            raise ValueError(f"objective must be one of {DISC_OBJECTIVES}, got {self.objective!r}")
        self._initialize()
        xr, xf = _flat(real) - 0.5, _flat(fake) - 0.5
        if xr.shape[0] == 0 or xf.shape[0] == 0:
            raise ValueError("discriminator update needs nonempty real and fake batches")
        out, trace = self.net_.forward_trace(np.vstack([xf, xr]))
        z = out[:, 0]
        s = expit(z)
        nf = xf.shape[0]
        sf, sr = s[:nf], s[nf:]
        loss = disc_loss(sf, sr)
        live_f = (sf > SCORE_CLAMP) & (sf < 1.0 - SCORE_CLAMP)
        live_r = (sr > SCORE_CLAMP) & (sr < 1.0 - SCORE_CLAMP)
        if self.objective == "literal":
            dz = np.concatenate([live_f * (1.0 - sf) / nf, live_r * (-sr) / sr.shape[0]])
        else:
            # d/dz of -log(1 - s) is s, of -log s is s - 1 (no clamp: computed in logit space)
            dz = np.concatenate([sf / nf, (sr - 1.0) / sr.shape[0]])
        grad = self.net_.backward(trace, dz[:, None])[0]
        acc = 0.5 * (np.mean(sf < 0.5) + np.mean(sr > 0.5))
        return loss, grad, float(acc)

    def partial_fit(self, real, fake):
        """One optimizer step on the discriminator loss."""
        loss, grad, acc = self.loss_and_grad(real, fake)
        if not np.isfinite(loss):
            raise FloatingPointError("discriminator loss is not finite")
        self.net_.params = self.optimizer_.step(self.net_.params, grad)
        self.last_loss_, self.last_accuracy_ = loss, acc
        return self

    def to_bytes(self) -> bytes:
        self._initialize()
        return checkpoint_bytes(self.net_, {"kind": "discriminator", "n_pixels": self.n_pixels,
                                            "hidden": list(self.hidden), "objective": self.objective})

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Discriminator":
        net, meta = parse_checkpoint(blob)
        if meta.get("kind") != "discriminator":
            raise ValueError("checkpoint does not hold a discriminator")
        d = cls(n_pixels=meta["n_pixels"], hidden=tuple(meta["hidden"]),
                objective=meta.get("objective", "bce"))
        d.net_ = net
        return d


def disc_score(d: Discriminator, image) -> float | np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3:
        return float(d.score(image[None])[0])
    return d.score(image)


def disc_update(d: Discriminator, real_batch, fake_batch, n_steps: int = 1) -> dict:
    """Take ``n_steps`` optimizer steps; report loss and accuracy of the last one."""
    for _ in range(n_steps):
        d.partial_fit(real_batch, fake_batch)
    return {"loss": d.last_loss_, "accuracy": d.last_accuracy_}


class FIDBatchReward:
    """Negative Frechet distance of a batch, broadcast to every member.

    ``group_size`` splits a collected batch into independent groups that
    each get their own batch-level reward.
    """

    kind = "fid-batch"

    def __init__(self, ref: GaussianStats, embedder: FeatureEmbedding, group_size: int | None = None):
        self.ref = ref
        self.embedder = embedder
        self.group_size = group_size

    def batch_reward(self, images) -> float:
        images = np.asarray(images)
        if images.shape[0] < 2:
            raise ValueError("batch reward needs at least 2 images")
        return -frechet_distance(stats_from_features(self.embedder.transform(images)), self.ref)

    def __call__(self, images) -> np.ndarray:
        images = np.asarray(images)
        B = images.shape[0]
        size = self.group_size or B
        out = np.empty(B)
        for start in range(0, B, size):
            out[start: start + size] = self.batch_reward(images[start: start + size])
        return out


def fid_batch_reward(images, ref: GaussianStats, embedder: FeatureEmbedding | None = None) -> float:
    if embedder is None:
        embedder = FeatureEmbedding().fit(np.asarray(images)[:1])
    return FIDBatchReward(ref, embedder).batch_reward(images)


def encode_image(image) -> bytes:
    """Hook wire format: uint32 ndim, uint32 dims, float64 values (all little-endian)."""
    image = np.ascontiguousarray(image, dtype="<f8")
    return struct.pack(f"<I{image.ndim}I", image.ndim, *image.shape) + image.tobytes()


def decode_image(blob: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<I", blob, 0)
    shape = struct.unpack_from(f"<{ndim}I", blob, 4)
    return np.frombuffer(blob, dtype="<f8", offset=4 + 4 * ndim).reshape(shape).astype(np.float64)


class ExternalScorer:
    """Per-image reward from a user hook.

    ``hook`` is either a Python callable ``image -> float`` or a command
    (list of arguments) that reads one encoded image on stdin and prints a
    single decimal number.
    """

    kind = "external"

    def __init__(self, hook: Callable | list[str] | str, timeout: float = 30.0):
        self.hook = hook
        self.timeout = timeout

    def score_one(self, image) -> float:
        try:
            if callable(self.hook):
                value = float(self.hook(np.asarray(image, dtype=np.float64)))
            else:
                cmd = [self.hook] if isinstance(self.hook, str) else list(self.hook)
                proc = subprocess.run(cmd, input=encode_image(image), capture_output=True,
                                      timeout=self.timeout, check=True)
                value = float(proc.stdout.decode().strip())
        except Exception as exc:
            raise RewardUnavailableError(f"external scorer failed: {exc}") from exc
        if not np.isfinite(value):
            raise RewardUnavailableError(f"external scorer returned {value}")
        return value

    def __call__(self, images) -> np.ndarray:
        """Scores per image; failures become NaN so the caller can drop them."""
        out = np.empty(len(images))
        for i, img in enumerate(images):
            try:
                out[i] = self.score_one(img)
            except RewardUnavailableError:
                out[i] = np.nan
        return out


def external_scorer(image, hook) -> float:
    return ExternalScorer(hook).score_one(image)
