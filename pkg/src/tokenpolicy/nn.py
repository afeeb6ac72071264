"""Small feed-forward networks with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector; each layer owns a slice of
it.  ``forward_trace`` returns the activations needed by ``backward``, so
the network object itself holds no per-call state and can be shared by
concurrent readers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

CHECKPOINT_MAGIC = b"SMALLNET"
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    """An optimizer step was refused because the gradient had NaN/inf entries."""


# -- layers -----------------------------------------------------------------


class Layer:
    kind = "layer"

    def shapes(self) -> list[tuple[int, ...]]:
        return []

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes()))

    def describe(self) -> dict:
        return {"kind": self.kind}

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.n_params)

    def forward(self, p, x, cond):
        raise NotImplementedError

    def backward(self, p, cache, dy, cond):
        raise NotImplementedError


class Affine(Layer):
    """``y = x @ W + b``; weights and bias uniform in ``+-1/sqrt(fan_in)``."""

    kind = "affine"

    def __init__(self, n_in: int, n_out: int, zero_init: bool = False, init_scale: float = 1.0):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.zero_init = bool(zero_init)
        self.init_scale = float(init_scale)

    def shapes(self):
        return [(self.n_in, self.n_out), (self.n_out,)]

    def describe(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out,
                "zero_init": self.zero_init, "init_scale": self.init_scale}

    def init(self, rng):
        if self.zero_init:
            return np.zeros(self.n_params)
        bound = self.init_scale / np.sqrt(self.n_in)
        w = rng.uniform(-bound, bound, size=(self.n_in, self.n_out))
        b = rng.uniform(-bound, bound, size=self.n_out)
        return np.concatenate([w.ravel(), b])

    def _split(self, p):
        k = self.n_in * self.n_out
        return p[:k].reshape(self.n_in, self.n_out), p[k:]

    def forward(self, p, x, cond):
        w, b = self._split(p)
        return x @ w + b, x

    def backward(self, p, x, dy, cond):
        w, _ = self._split(p)
        dp = np.concatenate([(x.T @ dy).ravel(), dy.sum(axis=0)])
        return dp, dy @ w.T


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str):
        if fn not in ("tanh", "relu", "silu"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def describe(self):
        return {"kind": self.kind, "fn": self.fn}

    def forward(self, p, x, cond):
        if self.fn == "tanh":
            y = np.tanh(x)
            return y, y
        if self.fn == "relu":
            return np.maximum(x, 0.0), x
        s = expit(x)
        return x * s, (x, s)

    def backward(self, p, cache, dy, cond):
        if self.fn == "tanh":
            return np.zeros(0), dy * (1.0 - cache**2)
        if self.fn == "relu":
            return np.zeros(0), dy * (cache > 0)
        x, s = cache
        return np.zeros(0), dy * (s * (1.0 + x * (1.0 - s)))


class AdaLayerNorm(Layer):
    """Layer norm whose scale/shift come from an affine map of the conditioning input.

    ``y = xhat * (1 + scale(cond)) + shift(cond)``.  The conditioning map is
    zero-initialised, so a fresh layer is a plain (affine-free) layer norm.
    With ``n_cond == 0`` the layer has no parameters.
    """

    kind = "adaln"

    def __init__(self, dim: int, n_cond: int, eps: float = 1e-5):
        self.dim, self.n_cond, self.eps = int(dim), int(n_cond), float(eps)

    def shapes(self):
        if self.n_cond == 0:
            return []
        return [(self.n_cond, 2 * self.dim), (2 * self.dim,)]

    def describe(self):
        return {"kind": self.kind, "dim": self.dim, "n_cond": self.n_cond, "eps": self.eps}

    def forward(self, p, x, cond):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc**2).mean(axis=1, keepdims=True) + self.eps)
        xhat = xc * inv
        if self.n_cond == 0:
            return xhat, (xhat, inv, None)
        if cond is None:
            raise ValueError("this network needs a conditioning input")
        k = self.n_cond * 2 * self.dim
        ss = cond @ p[:k].reshape(self.n_cond, 2 * self.dim) + p[k:]
        scale, shift = ss[:, : self.dim], ss[:, self.dim:]
        return xhat * (1.0 + scale) + shift, (xhat, inv, scale)

    def backward(self, p, cache, dy, cond):
        xhat, inv, scale = cache
        if scale is None:
            dxhat, dp = dy, np.zeros(0)
        else:
            dss = np.concatenate([dy * xhat, dy], axis=1)
            dp = np.concatenate([(cond.T @ dss).ravel(), dss.sum(axis=0)])
            dxhat = dy * (1.0 + scale)
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dp, dx


LAYER_TYPES = {cls.kind: cls for cls in (Affine, Activation, AdaLayerNorm)}


def layer_from_description(d: dict) -> Layer:
    d = dict(d)
    cls = LAYER_TYPES[d.pop("kind")]
    return cls(**d)


# -- network ----------------------------------------------------------------


@dataclass
class Trace:
    caches: list
    cond: np.ndarray | None
    single: bool


class SmallNet:
    """A stack of layers over a flat parameter vector."""

    def __init__(self, layers: list[Layer], params: np.ndarray | None = None, seed: int | None = 0):
        self.layers = list(layers)
        self.offsets = np.cumsum([0] + [layer.n_params for layer in self.layers])
        if params is None:
            rng = np.random.default_rng(seed)
            params = np.concatenate([layer.init(rng) for layer in self.layers] or [np.zeros(0)])
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params.copy()

    @property
    def n_params(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_in(self) -> int:
        for layer in self.layers:
            if isinstance(layer, Affine):
                return layer.n_in
        raise ValueError("network has no affine layer")

    @property
    def n_out(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Affine):
                return layer.n_out
        raise ValueError("network has no affine layer")

    @property
    def n_cond(self) -> int:
        return max([layer.n_cond for layer in self.layers if isinstance(layer, AdaLayerNorm)] or [0])

    def architecture(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def param_shapes(self) -> list[list[int]]:
        return [list(s) for layer in self.layers for s in layer.shapes()]

    def _slice(self, i):
        return self.params[self.offsets[i]: self.offsets[i + 1]]

    def _check_input(self, x, cond):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"input must have {self.n_in} features, got shape {np.shape(x)}")
        if self.n_cond:
            if cond is None:
                raise ValueError("this network needs a conditioning input")
            cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
            if cond.shape != (x.shape[0], self.n_cond):
                raise ValueError(f"conditioning must have shape {(x.shape[0], self.n_cond)}, got {cond.shape}")
        return x, cond, single

    def forward(self, x, cond=None) -> np.ndarray:
        out, _ = self.forward_trace(x, cond)
        return out

    def forward_trace(self, x, cond=None):
        x, cond, single = self._check_input(x, cond)
        caches = []
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(self._slice(i), x, cond)
            caches.append(cache)
        return (x[0] if single else x), Trace(caches, cond, single)

    def backward(self, trace: Trace | None, upstream) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of ``sum(upstream * output)`` w.r.t. parameters and input."""
        if trace is None:
            raise ValueError("backward needs the trace of a forward pass")
        dy = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        grads = []
        for i in range(len(self.layers) - 1, -1, -1):
            dp, dy = self.layers[i].backward(self._slice(i), trace.caches[i], dy, trace.cond)
            grads.append(dp)
        grad = np.concatenate(grads[::-1]) if grads else np.zeros(0)
        return grad, (dy[0] if trace.single else dy)

    def copy(self) -> "SmallNet":
        return SmallNet(self.layers, self.params.copy())


def mlp(n_in: int, hidden, n_out: int, activation: str = "silu", n_cond: int = 0,
        zero_last: bool = False, seed: int = 0) -> SmallNet:
    """Affine/[AdaLN]/activation blocks followed by an output affine layer."""
    layers: list[Layer] = []
    width = n_in
    for h in hidden:
        layers.append(Affine(width, h))
        if n_cond:
            layers.append(AdaLayerNorm(h, n_cond))
        layers.append(Activation(activation))
        width = h
    layers.append(Affine(width, n_out, zero_init=zero_last))
    return SmallNet(layers, seed=seed)


# -- optimizer --------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    step_count: int = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float | None = None) -> np.ndarray:
        """Return the updated parameters (descent on ``grads``)."""
        params = np.asarray(params, dtype=np.float64)
        grads = np.asarray(grads, dtype=np.float64)
        if params.shape != grads.shape:
            raise ValueError(f"parameter/gradient length mismatch: {params.shape} vs {grads.shape}")
        if not np.all(np.isfinite(grads)):
            raise NonFiniteGradientError(
                f"refusing optimizer step: {np.count_nonzero(~np.isfinite(grads))} non-finite gradient entries"
            )
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        elif self.m.shape != params.shape:
            raise ValueError("optimizer state does not match the parameter vector")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads**2
        m_hat = self.m / (1.0 - self.beta1**self.step_count)
        v_hat = self.v / (1.0 - self.beta2**self.step_count)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- checkpoints ------------------------------------------------------------
#
# Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
# header (architecture, shape list, parameter count, metadata), then the
# parameters as little-endian float64.


def checkpoint_bytes(net: SmallNet, metadata: dict | None = None) -> bytes:
    header = json.dumps(
        {
            "architecture": net.architecture(),
            "shapes": net.param_shapes(),
            "n_params": net.n_params,
            "metadata": metadata or {},
        },
        sort_keys=True,
    ).encode("utf-8")
    return (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(header))
        + header
        + np.ascontiguousarray(net.params, dtype="<f8").tobytes()
    )


def save_checkpoint(path, net: SmallNet, metadata: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, metadata))


def parse_checkpoint(blob: bytes) -> tuple[SmallNet, dict]:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a SmallNet checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(blob[off: off + hlen].decode("utf-8"))
    off += hlen
    n = header["n_params"]
    params = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
    if off + 8 * n != len(blob):
        raise ValueError("checkpoint length does not match its header")
    layers = [layer_from_description(d) for d in header["architecture"]]
    net = SmallNet(layers, params)
    if net.param_shapes() != header["shapes"]:
        raise ValueError("checkpoint shape list disagrees with its architecture")
    return net, header["metadata"]


def load_checkpoint(path) -> tuple[SmallNet, dict]:
    return parse_checkpoint(Path(path).read_bytes())
