"""Synthetic token worlds and the fixed toy token-to-patch decoder.

A world is a class-conditional distribution over token grids.  Three
process kinds are supported, all with exact statistics:

* ``deterministic``: one fixed pattern per class,
* ``iid``: every position drawn independently from a per-class distribution,
* ``markov``: a per-class Markov chain running through the grid in
  row-major order (start distribution + transition matrix).

Worlds small enough (``K**N <= 1e7``) can be enumerated exactly; larger
ones expose closed-form marginals and adjacent-pair statistics.
"""

from __future__ import annotations

import colorsys
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

MASK = -1
ENUMERATION_LIMIT = 10**7

PROCESS_KINDS = ("deterministic", "iid", "markov")


class CapabilityError(RuntimeError):
    """Raised when an exact computation is requested that is not available."""


@dataclass(frozen=True)
class Codebook:
    """K fixed ``P x P x C`` patches, one per token index."""

    patches: np.ndarray

    def __post_init__(self):
        patches = np.array(self.patches, dtype=np.float64)
        if patches.ndim != 4 or patches.shape[1] != patches.shape[2]:
            raise ValueError(f"patch table must have shape (K, P, P, C), got {patches.shape}")
        if patches.shape[0] < 2:
            raise ValueError("codebook needs at least 2 entries")
        if patches.min() < 0.0 or patches.max() > 1.0:
            raise ValueError("patch values must lie in [0, 1]")
        patches.setflags(write=False)
        object.__setattr__(self, "patches", patches)

    @property
    def size(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    @property
    def channels(self) -> int:
        return self.patches.shape[3]


def make_codebook(size: int, patch_size: int = 4, channels: int = 3) -> Codebook:
    """Distinct flat colours plus two textured patches (checkerboard, stripes)."""
    if size < 2:
        raise ValueError("codebook size must be >= 2")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    n_flat = max(size - 2, 0) if size > 2 else size
    patches = np.empty((size, patch_size, patch_size, channels))
    for k in range(n_flat):
        if channels == 3:
            rgb = colorsys.hsv_to_rgb(k / n_flat, 0.85, 0.35 + 0.6 * ((k % 2) == 0))
        else:
            rgb = ((k + 1) / (n_flat + 1),)
        patches[k] = np.asarray(rgb)[None, None, :]
    if size > 2:
        yy, xx = np.mgrid[0:patch_size, 0:patch_size]
        checker = ((yy + xx) % 2).astype(float)
        stripes = (yy % 2).astype(float)
        patches[size - 2] = (0.1 + 0.8 * checker)[..., None]
        patches[size - 1] = (0.2 + 0.6 * stripes)[..., None] * np.linspace(1.0, 0.5, channels)
    return Codebook(patches)


@dataclass
class ProcessSpec:
    kind: str
    patterns: np.ndarray | None = None  # (C, N) for deterministic
    probs: np.ndarray | None = None  # (C, K) for iid
    start: np.ndarray | None = None  # (C, K) for markov
    transition: np.ndarray | None = None  # (C, K, K) for markov


@dataclass
class WorldSpec:
    """Class-conditional token-grid distribution."""

    n_tokens: int
    codebook_size: int
    n_classes: int
    process: ProcessSpec
    height: int | None = None
    width: int | None = None
    seed: int = 0
    _tables: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.n_tokens <= 0:
            raise ValueError("n_tokens must be positive")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.height is None and self.width is None:
            side = math.isqrt(self.n_tokens)
            self.height, self.width = (side, side) if side * side == self.n_tokens else (1, self.n_tokens)
        elif self.height is None:
            self.height = self.n_tokens // self.width
        elif self.width is None:
            self.width = self.n_tokens // self.height
        if self.height * self.width != self.n_tokens:
            raise ValueError(f"grid {self.height}x{self.width} does not hold {self.n_tokens} tokens")
        self._validate_process()

    @property
    def grid(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def enumerable(self) -> bool:
        return self.codebook_size**self.n_tokens <= ENUMERATION_LIMIT

    def _validate_process(self):
        p, C, K, N = self.process, self.n_classes, self.codebook_size, self.n_tokens
        if p.kind not in PROCESS_KINDS:
            raise ValueError(f"unknown process kind {p.kind!r}; expected one of {PROCESS_KINDS}")
        if p.kind == "deterministic":
            p.patterns = np.asarray(p.patterns, dtype=np.int64).reshape(C, N)
            if p.patterns.min() < 0 or p.patterns.max() >= K:
                raise ValueError("deterministic patterns must use tokens in [0, K)")
        elif p.kind == "iid":
            p.probs = _stochastic(np.asarray(p.probs, dtype=np.float64).reshape(C, K), "probs")
        else:
            p.start = _stochastic(np.asarray(p.start, dtype=np.float64).reshape(C, K), "start")
            p.transition = _stochastic(
                np.asarray(p.transition, dtype=np.float64).reshape(C, K, K), "transition"
            )

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(f"{self.n_tokens},{self.codebook_size},{self.n_classes},{self.height},{self.width}".encode())
        h.update(self.process.kind.encode())
        for name in ("patterns", "probs", "start", "transition"):
            arr = getattr(self.process, name)
            if arr is not None:
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def _stochastic(arr: np.ndarray, name: str) -> np.ndarray:
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite and nonnegative")
    sums = arr.sum(axis=-1)
    if np.any(sums <= 0):
        raise ValueError(f"every {name} row needs positive mass")
    return arr / sums[..., None]


# -- constructors -----------------------------------------------------------


def deterministic_world(patterns, codebook_size: int, **kw) -> WorldSpec:
    patterns = np.atleast_2d(np.asarray(patterns, dtype=np.int64))
    return WorldSpec(
        n_tokens=patterns.shape[1],
        codebook_size=codebook_size,
        n_classes=patterns.shape[0],
        process=ProcessSpec("deterministic", patterns=patterns),
        **kw,
    )


def iid_world(probs, n_tokens: int, **kw) -> WorldSpec:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return WorldSpec(
        n_tokens=n_tokens,
        codebook_size=probs.shape[1],
        n_classes=probs.shape[0],
        process=ProcessSpec("iid", probs=probs),
        **kw,
    )


def markov_world(start, transition, n_tokens: int, **kw) -> WorldSpec:
    transition = np.asarray(transition, dtype=np.float64)
    if transition.ndim == 2:
        transition = transition[None]
    start = np.atleast_2d(np.asarray(start, dtype=np.float64))
    if start.shape[0] == 1 and transition.shape[0] > 1:
        start = np.repeat(start, transition.shape[0], axis=0)
    return WorldSpec(
        n_tokens=n_tokens,
        codebook_size=transition.shape[-1],
        n_classes=transition.shape[0],
        process=ProcessSpec("markov", start=start, transition=transition),
        **kw,
    )


def random_markov_world(
    n_tokens: int = 16,
    codebook_size: int = 8,
    n_classes: int = 4,
    concentrations=(0.15, 0.3, 0.6, 1.2),
    smoothing: float = 0.02,
    seed: int = 0,
    height: int | None = None,
    width: int | None = None,
) -> WorldSpec:
    """Per-class Dirichlet transition rows; lower concentration means sharper chains."""
    rng = np.random.default_rng(seed)
    conc = np.resize(np.asarray(concentrations, dtype=np.float64), n_classes)
    K = codebook_size
    start = np.empty((n_classes, K))
    trans = np.empty((n_classes, K, K))
    for c in range(n_classes):
        start[c] = rng.dirichlet(np.full(K, max(conc[c], 0.5)))
        trans[c] = rng.dirichlet(np.full(K, conc[c]), size=K)
    trans = (1.0 - smoothing) * trans + smoothing / K
    start = (1.0 - smoothing) * start + smoothing / K
    return markov_world(start, trans, n_tokens, seed=seed, height=height, width=width)


def default_world_config(seed: int = 0) -> dict:
    """Compact config form of :func:`default_world` (tables regenerated from the seed)."""
    return {
        "n_tokens": 16, "codebook_size": 8, "n_classes": 4, "height": 4, "width": 4, "seed": seed,
        "process": {"kind": "random_markov", "concentrations": [0.15, 0.3, 0.6, 1.2], "smoothing": 0.02},
    }


def default_world(seed: int = 0) -> WorldSpec:
    """Desk-scale world: 4x4 grid, 8 tokens, 4 classes."""
    return random_markov_world(16, 8, 4, seed=seed, height=4, width=4)


def tiny_markov_world(n_classes: int = 2) -> WorldSpec:
    """N=4, K=2 enumerable world; class 0 uses ``[[0.9, 0.1], [0.2, 0.8]]``."""
    trans = [[[0.9, 0.1], [0.2, 0.8]], [[0.3, 0.7], [0.6, 0.4]]][:n_classes]
    start = [[0.5, 0.5], [0.5, 0.5]][:n_classes]
    return markov_world(start, trans, 4, height=2, width=2)


# -- sampling ---------------------------------------------------------------


def sample_world(spec: WorldSpec, cls, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw token sequences of class ``cls``.

    ``cls`` may be a scalar or an array of per-sample classes.  With
    ``size=None`` and scalar ``cls`` a single ``(N,)`` sequence is returned,
    otherwise ``(size, N)``.
    """
    classes = np.asarray(cls)
    single = classes.ndim == 0 and size is None
    if classes.ndim == 0:
        classes = np.full(1 if size is None else size, int(classes))
    elif size is not None and size != classes.shape[0]:
        raise ValueError("size disagrees with the number of classes given")
    if classes.size and (classes.min() < 0 or classes.max() >= spec.n_classes):
        raise ValueError(f"class out of range [0, {spec.n_classes})")
    n, N = classes.shape[0], spec.n_tokens
    p = spec.process
    if p.kind == "deterministic":
        out = p.patterns[classes].copy()
    elif p.kind == "iid":
        out = _categorical(p.probs[classes][:, None, :].repeat(N, axis=1), rng)
    else:
        out = np.empty((n, N), dtype=np.int64)
        out[:, 0] = _categorical(p.start[classes], rng)
        for i in range(1, N):
            out[:, i] = _categorical(p.transition[classes, out[:, i - 1]], rng)
    return out[0] if single else out


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (u * cdf[..., -1:] > cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1).astype(np.int64)


# -- exact statistics -------------------------------------------------------


@dataclass
class ExactStatistics:
    """Either a full per-class probability table or closed-form moments.

    ``table[c, j]`` is the probability of ``sequences[j]`` under class ``c``.
    ``marginals[c, i, k]`` and ``pairs[c, i, a, b]`` (adjacent positions
    ``i, i+1``) are always filled.
    """

    kind: str
    marginals: np.ndarray
    pairs: np.ndarray
    sequences: np.ndarray | None = None
    table: np.ndarray | None = None

    def index_of(self, seqs: np.ndarray, K: int) -> np.ndarray:
        seqs = np.atleast_2d(seqs)
        weights = K ** np.arange(seqs.shape[1] - 1, -1, -1)
        return seqs @ weights


def all_sequences(n_tokens: int, codebook_size: int) -> np.ndarray:
    if codebook_size**n_tokens > ENUMERATION_LIMIT:
        raise CapabilityError(
            f"{codebook_size}^{n_tokens} sequences exceed the enumeration limit {ENUMERATION_LIMIT}"
        )
    return np.array(list(itertools.product(range(codebook_size), repeat=n_tokens)), dtype=np.int64).reshape(
        -1, n_tokens
    )


def exact_statistics(spec: WorldSpec, method: str = "auto") -> ExactStatistics:
    """Exact per-class sequence table (enumerable worlds) and closed-form moments."""
    if method not in ("auto", "enumerate", "moments"):
        raise ValueError(f"unknown method {method!r}")
    marginals, pairs = _closed_form_moments(spec)
    if method == "moments" or (method == "auto" and not spec.enumerable):
        return ExactStatistics("moments", marginals, pairs)
    if not spec.enumerable:
        raise CapabilityError(
            f"world with K^N = {spec.codebook_size}^{spec.n_tokens} cannot be enumerated"
        )
    cached = spec._tables.get("table")
    if cached is None:
        seqs = all_sequences(spec.n_tokens, spec.codebook_size)
        cached = (seqs, _sequence_probabilities(spec, seqs))
        spec._tables["table"] = cached
    seqs, table = cached
    return ExactStatistics("table", marginals, pairs, sequences=seqs, table=table)


def _sequence_probabilities(spec: WorldSpec, seqs: np.ndarray) -> np.ndarray:
    p, C = spec.process, spec.n_classes
    table = np.empty((C, seqs.shape[0]))
    for c in range(C):
        if p.kind == "deterministic":
            table[c] = np.all(seqs == p.patterns[c], axis=1).astype(float)
        elif p.kind == "iid":
            table[c] = np.prod(p.probs[c][seqs], axis=1)
        else:
            prob = p.start[c][seqs[:, 0]]
            for i in range(1, seqs.shape[1]):
                prob = prob * p.transition[c][seqs[:, i - 1], seqs[:, i]]
            table[c] = prob
    return table


def _closed_form_moments(spec: WorldSpec):
    p, C, K, N = spec.process, spec.n_classes, spec.codebook_size, spec.n_tokens
    marg = np.zeros((C, N, K))
    pairs = np.zeros((C, max(N - 1, 0), K, K))
    for c in range(C):
        if p.kind == "deterministic":
            marg[c, np.arange(N), p.patterns[c]] = 1.0
            for i in range(N - 1):
                pairs[c, i, p.patterns[c, i], p.patterns[c, i + 1]] = 1.0
        elif p.kind == "iid":
            marg[c] = p.probs[c]
            for i in range(N - 1):
                pairs[c, i] = np.outer(p.probs[c], p.probs[c])
        else:
            marg[c, 0] = p.start[c]
            for i in range(1, N):
                marg[c, i] = marg[c, i - 1] @ p.transition[c]
            for i in range(N - 1):
                pairs[c, i] = marg[c, i][:, None] * p.transition[c]
    return marg, pairs


# -- decoding ---------------------------------------------------------------


def decode_tokens(v, codebook: Codebook, grid: tuple[int, int] | None = None) -> np.ndarray:
    """Tile per-token patches in row-major grid order.

    Accepts a single ``(N,)`` sequence (returns ``(H*P, W*P, C)``) or a
    batch ``(B, N)`` (returns ``(B, H*P, W*P, C)``).
    """
    v = np.asarray(v)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    if np.any(v == MASK):
        raise ValueError("cannot decode a sequence that still contains MASK")
    if v.min() < 0 or v.max() >= codebook.size:
        raise ValueError("token index outside the codebook")
    B, N = v.shape
    if grid is None:
        side = math.isqrt(N)
        grid = (side, side) if side * side == N else (1, N)
    H, W = grid
    if H * W != N:
        raise ValueError(f"grid {H}x{W} does not hold {N} tokens")
    P, C = codebook.patch_size, codebook.channels
    tiles = codebook.patches[v].reshape(B, H, W, P, P, C)
    img = tiles.transpose(0, 1, 3, 2, 4, 5).reshape(B, H * P, W * P, C)
    return img[0] if single else img


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_png(path, image: np.ndarray, scale: int = 8) -> None:
    from PIL import Image

    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    Image.fromarray(img).save(path, format="PNG")


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png(path, image)
    else:
        write_ppm(path, image)


# -- config files -----------------------------------------------------------


def world_to_dict(spec: WorldSpec) -> dict:
    p = spec.process
    process: dict = {"kind": p.kind}
    for name in ("patterns", "probs", "start", "transition"):
        arr = getattr(p, name)
        if arr is not None:
            process[name] = np.asarray(arr).tolist()
    return {
        "n_tokens": spec.n_tokens,
        "codebook_size": spec.codebook_size,
        "n_classes": spec.n_classes,
        "height": spec.height,
        "width": spec.width,
        "seed": spec.seed,
        "process": process,
    }


def world_from_dict(d: dict) -> WorldSpec:
    d = dict(d)
    process = dict(d.pop("process"))
    kind = process.pop("kind")
    if kind == "random_markov":
        return random_markov_world(
            n_tokens=int(d["n_tokens"]),
            codebook_size=int(d["codebook_size"]),
            n_classes=int(d["n_classes"]),
            seed=int(d.get("seed", 0)),
            height=d.get("height"),
            width=d.get("width"),
            **process,
        )
    unknown = set(d) - {"n_tokens", "codebook_size", "n_classes", "height", "width", "seed"}
    if unknown:
        raise ValueError(f"unknown world keys: {sorted(unknown)}")
    return WorldSpec(
        n_tokens=int(d["n_tokens"]),
        codebook_size=int(d["codebook_size"]),
        n_classes=int(d["n_classes"]),
        height=d.get("height"),
        width=d.get("width"),
        seed=int(d.get("seed", 0)),
        process=ProcessSpec(kind, **process),
    )


def save_world(spec: WorldSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(world_to_dict(spec), sort_keys=False, default_flow_style=None))


def load_world(path) -> WorldSpec:
    return world_from_dict(yaml.safe_load(Path(path).read_text()))
