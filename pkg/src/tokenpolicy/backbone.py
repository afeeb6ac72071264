"""Frozen masked-token predictors.

Two interchangeable predictors share one surface
(``predict_logits``, ``features``, ``logits_and_features``):

* :class:`MaskedTokenPredictor`, a neural MLP trained with the masked
  token (MLM) objective, sklearn-style ``fit(X, y)``;
* :class:`TabularPredictor`, exact Bayes conditionals for enumerable worlds.

Classes are integer arrays; ``NULL_CLASS`` (-1) selects the unconditional
branch used by classifier-free guidance.
"""

from __future__ import annotations

import hashlib
import logging
import math

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .nn import Adam, mlp, parse_checkpoint, checkpoint_bytes
from .world import MASK, WorldSpec, exact_statistics, sample_world

log = logging.getLogger(__name__)

NULL_CLASS = -1
LOGIT_FLOOR = -60.0


class TrainingDivergedError(FloatingPointError):
    pass


def _as_batch(v, classes, n_classes: int):
    v = np.asarray(v, dtype=np.int64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    if classes is None:
        classes = NULL_CLASS
    classes = np.asarray(classes, dtype=np.int64)
    if classes.ndim == 0:
        classes = np.full(v.shape[0], int(classes))
    if classes.shape != (v.shape[0],):
        raise ValueError("one class label per sequence is required")
    if np.any((classes < NULL_CLASS) | (classes >= n_classes)):
        raise ValueError(f"class labels must be in [0, {n_classes}) or {NULL_CLASS} (null)")
    return v, classes, single


def cosine_mask_counts(n: int, n_tokens: int, rng: np.random.Generator) -> np.ndarray:
    """Per-example mask counts with ratio ``cos(pi/2 * u)``, ``u ~ U(0, 1)``."""
    ratio = np.cos(0.5 * np.pi * rng.random(n))
    return np.clip(np.ceil(ratio * n_tokens), 1, n_tokens).astype(np.int64)


def random_masks(n: int, n_tokens: int, rng: np.random.Generator) -> np.ndarray:
    counts = cosine_mask_counts(n, n_tokens, rng)
    ranks = np.argsort(np.argsort(rng.random((n, n_tokens)), axis=1), axis=1)
    return ranks < counts[:, None]


class MaskedTokenPredictor(BaseEstimator):
    """MLP over one-hot tokens plus a class embedding (with a null class).

    Trained with the masked-token objective on fresh random maskings of
    the rows of ``X``; after ``fit`` the network is treated as frozen.
    """

    def __init__(self, n_tokens=16, codebook_size=8, n_classes=4, hidden=(256, 256),
                 n_steps=3000, batch_size=256, learning_rate=1e-3, class_dropout=0.1,
                 random_state=0):
        self.n_tokens = n_tokens
        self.codebook_size = codebook_size
        self.n_classes = n_classes
        self.hidden = hidden
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.class_dropout = class_dropout
        self.random_state = random_state

    @property
    def n_features(self) -> int:
        return int(self.hidden[-1])

    def _encode(self, v: np.ndarray, classes: np.ndarray) -> np.ndarray:
        B, N = v.shape
        K1 = self.codebook_size + 1
        x = np.zeros((B, N * K1 + self.n_classes + 1))
        x[np.arange(B)[:, None], np.arange(N) * K1 + (v + 1)] = 1.0
        cls_slot = np.where(classes == NULL_CLASS, self.n_classes, classes)
        x[np.arange(B), N * K1 + cls_slot] = 1.0
        return x

    def _build(self):
        n_in = self.n_tokens * (self.codebook_size + 1) + self.n_classes + 1
        seed = int(np.random.default_rng(self.random_state).integers(2**31))
        return mlp(n_in, list(self.hidden), self.n_tokens * self.codebook_size, activation="silu", seed=seed)

    def fit(self, X, y):
        """Masked-token pre-training on sequences ``X`` with class labels ``y``."""
        X = np.asarray(X, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != self.n_tokens:
            raise ValueError(f"X must have shape (n, {self.n_tokens})")
        if y.shape != (X.shape[0],):
            raise ValueError("y must hold one class per row of X")
        if np.any(X < 0) or np.any(X >= self.codebook_size):
            raise ValueError("training sequences must be fully unmasked")
        rng = np.random.default_rng(self.random_state)
        self.net_ = self._build()
        opt = Adam(lr=self.learning_rate)
        N, K = self.n_tokens, self.codebook_size
        self.loss_curve_ = []
        for step in range(self.n_steps):
            idx = rng.integers(0, X.shape[0], self.batch_size)
            target = X[idx]
            cls = y[idx].copy()
            cls[rng.random(self.batch_size) < self.class_dropout] = NULL_CLASS
            mask = random_masks(self.batch_size, N, rng)
            inp = np.where(mask, MASK, target)
            out, trace = self.net_.forward_trace(self._encode(inp, cls))
            logits = out.reshape(-1, N, K)
            logp = log_softmax(logits, axis=-1)
            n_masked = mask.sum()
            nll = -np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
            loss = float((nll * mask).sum() / n_masked)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"masked-token loss became non-finite at step {step} "
                    f"(last finite losses: {self.loss_curve_[-3:]})"
                )
            self.loss_curve_.append(loss)
            dlogits = np.exp(logp)
            np.put_along_axis(dlogits, target[..., None],
                              np.take_along_axis(dlogits, target[..., None], axis=-1) - 1.0, axis=-1)
            dlogits *= mask[..., None] / n_masked
            grad, _ = self.net_.backward(trace, dlogits.reshape(self.batch_size, -1))
            lr = 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * step / self.n_steps))
            self.net_.params = opt.step(self.net_.params, grad, lr=lr)
            if step % 500 == 0:
                log.debug("mlm step %d loss %.4f", step, loss)
        self.net_.params.setflags(write=False)
        return self

    def _forward(self, v, classes):
        check_is_fitted(self, "net_")
        v, classes, single = _as_batch(v, classes, self.n_classes)
        if v.shape[1] != self.n_tokens:
            raise ValueError(f"sequences must have {self.n_tokens} tokens")
        out, trace = self.net_.forward_trace(self._encode(v, classes))
        logits = out.reshape(-1, self.n_tokens, self.codebook_size)
        # penultimate activation = output of the last hidden block
        feats = trace.caches[-2][0] * trace.caches[-2][1]
        return logits, feats, single

    def logits_and_features(self, v, classes=None):
        logits, feats, single = self._forward(v, classes)
        return (logits[0], feats[0]) if single else (logits, feats)

    def predict_logits(self, v, classes=None) -> np.ndarray:
        return self.logits_and_features(v, classes)[0]

    def features(self, v, classes=None) -> np.ndarray:
        return self.logits_and_features(v, classes)[1]

    def predict_proba(self, v, classes=None) -> np.ndarray:
        return softmax(self.predict_logits(v, classes), axis=-1)

    def masked_cross_entropy(self, X, y, rng: np.random.Generator) -> float:
        """Mean NLL (nats) of masked positions under random cosine maskings."""
        X = np.asarray(X, dtype=np.int64)
        mask = random_masks(X.shape[0], self.n_tokens, rng)
        logp = log_softmax(self.predict_logits(np.where(mask, MASK, X), y), axis=-1)
        nll = -np.take_along_axis(logp, X[..., None], axis=-1)[..., 0]
        return float((nll * mask).sum() / mask.sum())

    # -- persistence ----------------------------------------------------------

    def to_bytes(self, world_fingerprint: str = "") -> bytes:
        check_is_fitted(self, "net_")
        meta = {"kind": "masked_token_predictor", "world_fingerprint": world_fingerprint,
                "params": {k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in self.get_params().items()}}
        return checkpoint_bytes(self.net_, meta)

    @classmethod
    def from_bytes(cls, blob: bytes, world_fingerprint: str | None = None) -> "MaskedTokenPredictor":
        net, meta = parse_checkpoint(blob)
        if meta.get("kind") != "masked_token_predictor":
            raise ValueError("checkpoint does not hold a masked-token predictor")
        if world_fingerprint is not None and meta["world_fingerprint"] != world_fingerprint:
            raise ValueError(
                f"backbone was trained on world {meta['world_fingerprint']}, not {world_fingerprint}"
            )
        params = dict(meta["params"])
        params["hidden"] = tuple(params["hidden"])
        est = cls(**params)
        est.net_ = net
        est.net_.params.setflags(write=False)
        return est

    def checkpoint_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def mlm_pretrain(spec: WorldSpec, n_steps: int = 3000, rng: np.random.Generator | int = 0,
                 n_train: int = 100_000, **kwargs) -> MaskedTokenPredictor:
    """Sample a training set from ``spec`` and fit a neural predictor on it."""
    rng = np.random.default_rng(rng)
    y = rng.integers(0, spec.n_classes, n_train)
    X = sample_world(spec, y, rng)
    seed = int(rng.integers(2**31))
    return MaskedTokenPredictor(
        n_tokens=spec.n_tokens, codebook_size=spec.codebook_size, n_classes=spec.n_classes,
        n_steps=n_steps, random_state=seed, **kwargs,
    ).fit(X, y)


class TabularPredictor:
    """Exact conditionals ``p(v_i | observed tokens, class)`` by enumeration.

    Every partially-masked state (``(K+1)^N`` of them) is precomputed, so
    lookups are vectorised table reads.  The null class uses the uniform
    mixture over classes.
    """

    STATE_LIMIT = 200_000

    def __init__(self, spec: WorldSpec):
        if not spec.enumerable or (spec.codebook_size + 1) ** spec.n_tokens > self.STATE_LIMIT:
            raise ValueError("tabular predictor needs a small enumerable world")
        self.spec = spec
        self.n_tokens, self.codebook_size, self.n_classes = spec.n_tokens, spec.codebook_size, spec.n_classes
        stats = exact_statistics(spec, method="enumerate")
        table = np.vstack([stats.table, stats.table.mean(axis=0, keepdims=True)])
        N, K = self.n_tokens, self.codebook_size
        states = np.array(np.unravel_index(np.arange((K + 1) ** N), (K + 1,) * N)).T - 1
        seqs = stats.sequences
        consistent = np.all((states[:, None, :] == MASK) | (states[:, None, :] == seqs[None]), axis=2)
        onehot = np.eye(K)[seqs]  # (S, N, K)
        # probs[c, state, i, k] = sum_seq consistent * P_c(seq) * [seq_i == k]
        weighted = consistent[None] * table[:, None, :]
        probs = np.einsum("csj,jnk->csnk", weighted, onehot)
        norm = probs.sum(axis=-1, keepdims=True)
        self.proba_ = np.where(norm > 0, probs / np.where(norm > 0, norm, 1.0), 1.0 / K)
        self.logits_ = np.maximum(np.log(np.maximum(self.proba_, 1e-300)), LOGIT_FLOOR)
        ent = -(self.proba_ * np.log(np.maximum(self.proba_, 1e-300))).sum(axis=-1)
        self.features_ = np.concatenate([ent, self.proba_.max(axis=-1)], axis=-1)
        self._weights = (K + 1) ** np.arange(N - 1, -1, -1)

    @property
    def n_features(self) -> int:
        return 2 * self.n_tokens

    def _index(self, v, classes):
        v, classes, single = _as_batch(v, classes, self.n_classes)
        if v.shape[1] != self.n_tokens:
            raise ValueError(f"sequences must have {self.n_tokens} tokens")
        if np.any((v < MASK) | (v >= self.codebook_size)):
            raise ValueError("token outside the codebook")
        cls = np.where(classes == NULL_CLASS, self.n_classes, classes)
        return cls, (v + 1) @ self._weights, single

    def logits_and_features(self, v, classes=None):
        cls, state, single = self._index(v, classes)
        logits, feats = self.logits_[cls, state], self.features_[cls, state]
        return (logits[0], feats[0]) if single else (logits, feats)

    def predict_logits(self, v, classes=None) -> np.ndarray:
        return self.logits_and_features(v, classes)[0]

    def features(self, v, classes=None) -> np.ndarray:
        return self.logits_and_features(v, classes)[1]

    def predict_proba(self, v, classes=None) -> np.ndarray:
        cls, state, single = self._index(v, classes)
        p = self.proba_[cls, state]
        return p[0] if single else p
