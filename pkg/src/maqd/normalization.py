"""Normalization layers (BN / LN / LBN) and weight standardization.

All three normalizations share one affine form, g/sigma * (x - mu) + b with
per-channel g, b; they differ only in the axes the statistics are pooled
over:

    BN   per channel, over (n, h, w)
    LN   per sample, over (c, h, w)
    LBN  one scalar pair over (n, c, h, w)

BN and LBN keep EMA running statistics for input-independent evaluation;
LN recomputes per-sample statistics at eval time. Variances use the
population convention (divide by count).

Weight standardization operates on an (out, fan_in) view of a weight
tensor: each row is centered and divided by sqrt(fan_in)*std + eps (eps
outside the square root).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class NormKind(enum.Enum):
    BN = "bn"
    LN = "ln"
    LBN = "lbn"


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


# Reduction axes per kind, in (n, c, h, w) layout.
_REDUCE_AXES = {
    NormKind.BN: (0, 2, 3),
    NormKind.LN: (1, 2, 3),
    NormKind.LBN: (0, 1, 2, 3),
}


@dataclass
class NormLayerState:
    """Trainable per-channel affine plus running statistics for one layer."""

    kind: NormKind
    g: np.ndarray          # (C,)
    b: np.ndarray          # (C,)
    eps: float = 1e-5
    ema_rate: float = 0.1
    # BN: (C,) vectors; LBN: 0-d scalars; LN: None.
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @classmethod
    def create(cls, kind: NormKind, channels: int, eps: float = 1e-5,
               ema_rate: float = 0.1, dtype=np.float64) -> "NormLayerState":
        if kind is NormKind.BN:
            rm = np.zeros(channels, dtype=dtype)
            rv = np.ones(channels, dtype=dtype)
        elif kind is NormKind.LBN:
            rm = np.zeros((), dtype=dtype)
            rv = np.ones((), dtype=dtype)
        else:
            rm = rv = None
        return cls(kind=kind,
                   g=np.ones(channels, dtype=dtype),
                   b=np.zeros(channels, dtype=dtype),
                   eps=eps, ema_rate=ema_rate,
                   running_mean=rm, running_var=rv)

    @property
    def channels(self) -> int:
        return self.g.shape[0]


@dataclass
class NormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    g: np.ndarray
    axes: tuple[int, ...]


def _stats(x: np.ndarray, axes: tuple[int, ...]):
    mean = np.mean(x, axis=axes, keepdims=True, dtype=np.float64)
    var = np.mean(np.square(x.astype(np.float64) - mean), axis=axes, keepdims=True)
    return mean.astype(x.dtype), var.astype(x.dtype)


def norm_forward(x: np.ndarray, st: NormLayerState, mode: Mode):
    """Normalize a (n, c, h, w) tensor. Returns (output, cache); the cache is
    None in EVAL mode. TRAIN mode updates the running statistics (BN, LBN)."""
    if x.ndim != 4 or x.shape[1] != st.channels:
        raise ValueError(f"expected (n, {st.channels}, h, w) input, got {x.shape}")
    axes = _REDUCE_AXES[st.kind]
    g4 = st.g.reshape(1, -1, 1, 1)
    b4 = st.b.reshape(1, -1, 1, 1)

    if mode is Mode.TRAIN or st.kind is NormKind.LN:
        mean, var = _stats(x, axes)
        if mode is Mode.TRAIN and st.kind is not NormKind.LN:
            r = st.ema_rate
            st.running_mean = ((1 - r) * st.running_mean + r * mean.squeeze()).astype(st.running_mean.dtype)
            st.running_var = ((1 - r) * st.running_var + r * var.squeeze()).astype(st.running_var.dtype)
    else:
        mean = np.asarray(st.running_mean, dtype=x.dtype).reshape(1, -1, 1, 1) \
            if st.kind is NormKind.BN else np.asarray(st.running_mean, dtype=x.dtype)
        var = np.asarray(st.running_var, dtype=x.dtype).reshape(1, -1, 1, 1) \
            if st.kind is NormKind.BN else np.asarray(st.running_var, dtype=x.dtype)

    inv_std = 1.0 / np.sqrt(var + st.eps)
    x_hat = (x - mean) * inv_std
    y = g4 * x_hat + b4
    if mode is Mode.TRAIN:
        cache = NormCache(x_hat=x_hat, inv_std=inv_std, g=st.g, axes=axes)
        return y.astype(x.dtype), cache
    return y.astype(x.dtype), None


def norm_backward(cache: NormCache, upstream: np.ndarray):
    """Exact gradients through a TRAIN-mode forward, including the dependence
    of the statistics on the input. Returns (grad_x, grad_g, grad_b)."""
    if cache is None:
        raise ValueError("norm_backward requires a TRAIN-mode cache")
    x_hat, inv_std, axes = cache.x_hat, cache.inv_std, cache.axes
    g4 = cache.g.reshape(1, -1, 1, 1)
    d_xhat = upstream * g4
    m1 = np.mean(d_xhat, axis=axes, keepdims=True, dtype=np.float64).astype(upstream.dtype)
    m2 = np.mean(d_xhat * x_hat, axis=axes, keepdims=True, dtype=np.float64).astype(upstream.dtype)
    grad_x = (d_xhat - m1 - x_hat * m2) * inv_std
    grad_g = np.sum(upstream * x_hat, axis=(0, 2, 3), dtype=np.float64).astype(cache.g.dtype)
    grad_b = np.sum(upstream, axis=(0, 2, 3), dtype=np.float64).astype(cache.g.dtype)
    return grad_x.astype(upstream.dtype), grad_g, grad_b


@dataclass
class WSState:
    """Raw weights viewed as (out, fan_in) rows, plus the stabilizer."""

    weight: np.ndarray
    eps: float = 1e-10

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[1] < 1:
            raise ValueError(f"expected (out, fan_in) weights, got {self.weight.shape}")


@dataclass
class WSCache:
    w: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    denom: np.ndarray
    fan_in: int


def weight_standardize(ws: WSState):
    """Per-row standardization: (W - mu) / (sqrt(fan_in) * sigma + eps)."""
    w = ws.weight
    fan_in = w.shape[1]
    mu = np.mean(w, axis=1, keepdims=True, dtype=np.float64)
    sigma = np.sqrt(np.mean(np.square(w.astype(np.float64) - mu), axis=1, keepdims=True))
    denom = np.sqrt(fan_in) * sigma + ws.eps
    w_hat = ((w - mu) / denom).astype(w.dtype)
    cache = WSCache(w=w, mu=mu.astype(w.dtype), sigma=sigma.astype(w.dtype),
                    denom=denom.astype(w.dtype), fan_in=fan_in)
    return w_hat, cache


def weight_standardize_backward(cache: WSCache, upstream: np.ndarray) -> np.ndarray:
    """Exact gradient of the standardized weights w.r.t. the raw weights."""
    w, mu, sigma, denom, fan_in = cache.w, cache.mu, cache.sigma, cache.denom, cache.fan_in
    centered = w - mu
    u_centered = upstream - np.mean(upstream, axis=1, keepdims=True, dtype=np.float64).astype(upstream.dtype)
    # d denom / d w_i = sqrt(fan_in) * (w_i - mu) / (fan_in * sigma)
    t = np.sum(upstream * centered, axis=1, keepdims=True, dtype=np.float64).astype(upstream.dtype)
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    sigma_term = np.where(
        sigma > 0,
        centered * (np.sqrt(fan_in) * t) / (fan_in * safe_sigma * denom ** 2),
        0.0,
    )
    return (u_centered / denom - sigma_term).astype(w.dtype)
