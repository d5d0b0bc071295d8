"""Dense numeric core: layers with hand-derived backward passes, optimizers,
and a seedable counter-based random source.

Arrays are plain numpy. Training runs in float32; gradient verification
builds everything in float64 (every op preserves the dtype of its inputs).
Backward functions are stateless: they take the original inputs plus the
upstream gradient and recompute cheap intermediates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# random source
#
# Philox is a counter-based generator: identical keys give identical draw
# sequences on every platform, and disjoint keys give independent streams.


def rng_from_seed(seed: int) -> np.random.Generator:
    """Master stream for a run."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent reproducible stream derived from (seed, index)."""
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02,
                 dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Truncated normal init, std 0.02, clipped by resampling at +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# linear


@dataclass
class LinearParams:
    """weight is (out, in); bias is (out,) or None for a bias-free layer."""
    weight: np.ndarray
    bias: np.ndarray | None = None

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]


def linear_init(n_in: int, n_out: int, rng: np.random.Generator,
                bias: bool = False, dtype=DEFAULT_DTYPE) -> LinearParams:
    w = trunc_normal((n_out, n_in), rng, dtype=dtype)
    b = np.zeros(n_out, dtype=dtype) if bias else None
    return LinearParams(w, b)


def linear_forward(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if x.shape[-1] != p.n_in:
        raise ShapeError(f"linear: input width {x.shape[-1]} != {p.n_in}")
    y = x @ p.weight.T
    if p.bias is not None:
        y = y + p.bias
    return y


def linear_backward(x: np.ndarray, p: LinearParams, dy: np.ndarray):
    """Returns (dx, dW, db); db is None for bias-free layers."""
    if dy.shape[-1] != p.n_out:
        raise ShapeError(f"linear backward: grad width {dy.shape[-1]} != {p.n_out}")
    dx = dy @ p.weight
    dW = dy.reshape(-1, p.n_out).T @ x.reshape(-1, p.n_in)
    db = dy.reshape(-1, p.n_out).sum(axis=0) if p.bias is not None else None
    return dx, dW, db


# ---------------------------------------------------------------------------
# layer norm (over the last dimension)


def layernorm_forward(x: np.ndarray, gain: np.ndarray, shift: np.ndarray,
                      eps: float = 1e-6) -> np.ndarray:
    if x.shape[-1] == 0:
        raise ShapeError("layernorm: empty normalization axis")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gain + shift


def layernorm_backward(x: np.ndarray, gain: np.ndarray, dy: np.ndarray,
                       eps: float = 1e-6):
    """Returns (dx, dgain, dshift)."""
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * istd
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dshift = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gain
    dx = istd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dshift


# ---------------------------------------------------------------------------
# softmax / gelu / dropout


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward from the softmax output y (not the logits)."""
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    return x * 0.5 * (1.0 + erf(x * INV_SQRT2))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    return dy * (cdf + x * phi)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None,
            training: bool):
    """Returns (y, mask). Survivors scaled by 1/(1-rate); eval is identity
    and mask is None. rate must be in [0, 1)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    return x * keep * scale, keep


def dropout_backward(mask, rate: float, dy: np.ndarray) -> np.ndarray:
    if mask is None:
        return dy
    return dy * mask * np.asarray(1.0 / (1.0 - rate), dtype=dy.dtype)


# ---------------------------------------------------------------------------
# optimizers
#
# Parameters and gradients travel as name->array dicts; state arrays are
# keyed the same way and updates happen in place.


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.9) -> None:
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"sgd: grad shape {g.shape} != param {p.shape} ({name})")
        if momentum != 0.0:
            v = velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
                velocity[name] = v
            v *= momentum
            v += g
            g = v
        p -= (lr * g).astype(p.dtype, copy=False)


def adam_step(params: dict, grads: dict, m: dict, v: dict, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    if t < 1:
        raise ValueError("adam: step count t must be >= 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad shape {g.shape} != param {p.shape} ({name})")
        mk = m.setdefault(name, np.zeros_like(p))
        vk = v.setdefault(name, np.zeros_like(p))
        mk *= beta1
        mk += (1.0 - beta1) * g
        vk *= beta2
        vk += (1.0 - beta2) * g * g
        update = (mk / bc1) / (np.sqrt(vk / bc2) + eps)
        p -= (lr * update).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        sgd_step(params, grads, self.velocity, self.lr, self.momentum)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        adam_step(params, grads, self.m, self.v, self.t, self.lr,
                  self.beta1, self.beta2, self.eps)
