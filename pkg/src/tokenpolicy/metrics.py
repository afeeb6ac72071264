"""Toy Frechet distance, exact divergences on enumerable worlds, and diversity."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .world import WorldSpec, exact_statistics

EMBED_DIM = 32
EMBED_SEED = 20240711
JITTER = 1e-6


class FeatureEmbedding(TransformerMixin, BaseEstimator):
    """Frozen random projection of flattened pixels followed by ``tanh``.

    ``fit`` only records the input width; the projection itself is a pure
    function of ``(n_pixels, dim, seed)``.
    """

    def __init__(self, dim=EMBED_DIM, seed=EMBED_SEED):
        self.dim = dim
        self.seed = seed

    def fit(self, X, y=None):
        X = _flatten(X)
        n_in = X.shape[1]
        rng = np.random.default_rng([self.seed, n_in, self.dim])
        self.weights_ = rng.standard_normal((n_in, self.dim)) * (3.0 / np.sqrt(n_in))
        self.bias_ = 0.5 * rng.standard_normal(self.dim)
        self.n_features_in_ = n_in
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        X = _flatten(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected images with {self.n_features_in_} values, got {X.shape[1]}")
        return np.tanh((X - 0.5) @ self.weights_ + self.bias_)


def _flatten(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        raise ValueError("expected a batch of images")
    return X.reshape(X.shape[0], -1)


_EMBEDDERS: dict[int, FeatureEmbedding] = {}


def feature_embed(images) -> np.ndarray:
    """Embed a batch of images (or a single image) with the default frozen map."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    n_in = int(np.prod(batch.shape[1:]))
    emb = _EMBEDDERS.get(n_in)
    if emb is None:
        emb = _EMBEDDERS[n_in] = FeatureEmbedding().fit(batch[:1])
    out = emb.transform(batch)
    return out[0] if single else out


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d}")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-9:
            raise ValueError("covariance is not symmetric")
        if self.count < 2:
            raise ValueError("statistics need at least 2 samples")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def stats_from_features(features, jitter: float = JITTER) -> GaussianStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit statistics")
    cov = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
    cov = 0.5 * (cov + cov.T) + jitter * np.eye(f.shape[1])
    return GaussianStats(f.mean(axis=0), cov, f.shape[0])


def fit_stats(images, embedder=None) -> GaussianStats:
    """Mean and unbiased covariance (plus ``1e-6 I``) of embedded images."""
    images = np.asarray(images)
    if images.shape[0] < 2:
        raise ValueError("need at least 2 images to fit statistics")
    feats = feature_embed(images) if embedder is None else embedder.transform(images)
    return stats_from_features(feats)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product square root is taken from the eigenvalues of
    the symmetric PSD matrix ``S_a^(1/2) S_b S_a^(1/2)``, which shares its
    spectrum with ``S_a S_b``.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a is b:
        return 0.0
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d2 = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def toy_fid(images, ref: GaussianStats, embedder=None) -> float:
    return frechet_distance(fit_stats(images, embedder), ref)


def diversity_from_features(features) -> float:
    f = np.asarray(features, dtype=np.float64)
    if f.shape[0] < 2:
        raise ValueError("diversity needs at least 2 samples")
    return float(pdist(f.reshape(f.shape[0], -1)).mean())


def diversity_metric(images, embedder=None) -> float:
    """Mean Euclidean feature distance over unordered pairs."""
    images = np.asarray(images)
    if images.shape[0] < 2:
        raise ValueError("diversity needs at least 2 images")
    feats = feature_embed(images) if embedder is None else embedder.transform(images)
    return diversity_from_features(feats)


def exact_divergence(samples, spec: WorldSpec, cls: int | None = None) -> dict:
    """TV and KL(exact || add-one-smoothed empirical) against the exact table.

    ``cls=None`` compares with the uniform mixture over classes.
    """
    if not spec.enumerable:
        raise ValueError("exact divergence needs an enumerable world")
    stats = exact_statistics(spec, method="enumerate")
    p = stats.table.mean(axis=0) if cls is None else stats.table[cls]
    idx = stats.index_of(np.asarray(samples, dtype=np.int64), spec.codebook_size)
    counts = np.bincount(idx, minlength=p.shape[0]).astype(np.float64)
    n = counts.sum()
    emp = counts / n
    smoothed = (counts + 1.0) / (n + p.shape[0])
    nz = p > 0
    return {
        "tv": float(0.5 * np.abs(emp - p).sum()),
        "kl": float(np.sum(p[nz] * np.log(p[nz] / smoothed[nz]))),
        "n": int(n),
    }


# -- stats files ------------------------------------------------------------


def _stats_digest(mean, cov, count, seed) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mean, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(cov, dtype="<f8").tobytes())
    h.update(f"{int(count)}:{int(seed)}".encode())
    return h.hexdigest()


def save_stats(path, stats: GaussianStats, embed_seed: int = EMBED_SEED) -> None:
    path = Path(path)
    payload = {
        "mean": stats.mean.tolist(),
        "cov": stats.cov.tolist(),
        "count": int(stats.count),
        "embed_seed": int(embed_seed),
        "sha256": _stats_digest(stats.mean, stats.cov, stats.count, embed_seed),
    }
    path.write_text(json.dumps(payload))


def load_stats(path) -> GaussianStats:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"reference statistics file not found: {path}")
    payload = json.loads(path.read_text())
    mean, cov = np.asarray(payload["mean"]), np.asarray(payload["cov"])
    digest = _stats_digest(mean, cov, payload["count"], payload["embed_seed"])
    if digest != payload["sha256"]:
        raise ValueError(f"integrity check failed for statistics file {path}")
    return GaussianStats(mean, cov, payload["count"])
