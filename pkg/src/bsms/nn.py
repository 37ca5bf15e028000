"""Two-hidden-layer ReLU MLPs with residual connection and LayerNorm.

Forward passes return a cache; ``mlp_grad`` consumes it to produce exact
reverse-mode gradients.  Everything is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LN_EPS = 1e-5
HIDDEN = 128


@dataclass(eq=False)
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    P: np.ndarray | None = None  # residual projection when in_dim != out_dim
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    use_residual: bool = True

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W3.shape[1]

    @property
    def use_layernorm(self) -> bool:
        return self.gamma is not None

    def tensors(self) -> dict[str, np.ndarray]:
        names = ("W1", "b1", "W2", "b2", "W3", "b3", "P", "gamma", "beta")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def init_params(
    dims,
    seed=0,
    layernorm: bool = True,
    residual: bool = True,
) -> MlpParams:
    """Glorot-uniform weights, zero biases, unit LayerNorm gain.

    ``dims`` is ``(in, hidden1, hidden2, out)``; ``seed`` may be an int or a
    ``numpy.random.Generator``.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or min(dims) <= 0:
        raise ValueError(f"dims must be four positive sizes, got {dims}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d_in, h1, h2, d_out = dims
    p = MlpParams(
        W1=_glorot(rng, d_in, h1),
        b1=np.zeros(h1),
        W2=_glorot(rng, h1, h2),
        b2=np.zeros(h2),
        W3=_glorot(rng, h2, d_out),
        b3=np.zeros(d_out),
        use_residual=residual,
    )
    if residual and d_in != d_out:
        p.P = _glorot(rng, d_in, d_out)
    if layernorm:
        p.gamma = np.ones(d_out)
        p.beta = np.zeros(d_out)
    return p


def layernorm(x: np.ndarray, gamma=None, beta=None, eps: float = LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat if gamma is None else xhat * gamma + beta
    return y, (xhat, inv)


def _layernorm_grad(dy, gamma, cache):
    xhat, inv = cache
    dxhat = dy * gamma
    d = xhat.shape[-1]
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def mlp_apply(p: MlpParams, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != p.in_dim:
        raise ValueError(f"input must be batch x {p.in_dim}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite MLP input")
    z1 = x @ p.W1 + p.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ p.W2 + p.b2
    h2 = np.maximum(z2, 0.0)
    out = h2 @ p.W3 + p.b3
    if p.use_residual:
        out = out + (x if p.P is None else x @ p.P)
    ln_cache = None
    if p.use_layernorm:
        out, ln_cache = layernorm(out, p.gamma, p.beta)
    return out, (x, z1, h1, z2, h2, ln_cache)


def mlp_grad(p: MlpParams, cache, dy):
    """Return ``(grads, dx)``; ``grads`` is keyed like ``p.tensors()``."""
    x, z1, h1, z2, h2, ln_cache = cache
    dy = np.asarray(dy, dtype=float)
    if dy.shape != (x.shape[0], p.out_dim):
        raise ValueError(f"upstream gradient shape {dy.shape} != {(x.shape[0], p.out_dim)}")
    g: dict[str, np.ndarray] = {}
    if p.use_layernorm:
        dy, g["gamma"], g["beta"] = _layernorm_grad(dy, p.gamma, ln_cache)
    dx = np.zeros_like(x)
    if p.use_residual:
        if p.P is None:
            dx = dy.copy()
        else:
            g["P"] = x.T @ dy
            dx = dy @ p.P.T
    g["W3"] = h2.T @ dy
    g["b3"] = dy.sum(axis=0)
    dz2 = (dy @ p.W3.T) * (z2 > 0)
    g["W2"] = h1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p.W2.T) * (z1 > 0)
    g["W1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    dx = dx + dz1 @ p.W1.T
    return g, dx


def save_tensors(tensors: dict[str, np.ndarray], path, extra: dict | None = None) -> None:
    """JSON checkpoint: named tensors with declared shapes, flat row-major data."""
    doc = {
        "format": "bsms-tensors/1",
        "tensors": {
            k: {"shape": list(v.shape), "dtype": "float64", "data": v.reshape(-1).tolist()}
            for k, v in sorted(tensors.items())
        },
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "bsms-tensors/1":
        raise ValueError(f"{path}: not a tensor checkpoint")
    tensors = {
        k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc.pop("tensors").items()
    }
    return tensors, doc
