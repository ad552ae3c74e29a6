"""Scaled round-clip quantizers and their surrogate gradients.

Weights are pre-scaled by `s`, rounded onto a lattice of spacing 1/qscale,
and clipped to [-1, 1]; activations are rounded onto an (m_a)-state lattice
in [0, 1]. The backward pass replaces the staircase derivative with an
indicator band (weights) or a sum of scaled-sigmoid bumps centered on the
state-switching thresholds (activations).

All functions accept scalars or numpy arrays and are pure.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class QScaleMode(enum.Enum):
    """Which lattice scale the weight quantizer uses for m_w states."""

    HALF_MW = "half_mw"                    # qscale = m_w / 2
    HALF_MW_MINUS_ONE = "half_mw_minus_one"  # qscale = (m_w - 1) / 2


class QuantKind(enum.Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"


@dataclass(frozen=True)
class QuantConfig:
    """All quantization hyperparameters.

    m_w: odd number of weight states (>= 3).
    m_a: number of activation states (>= 2).
    qscale_mode: weight lattice scale selection.
    s: weight pre-scale; 1/3 puts a ~99.7% Gaussian mass inside the clip band.
    alpha: sharpness of the activation surrogate sigmoid.
    """

    m_w: int = 15
    m_a: int = 8
    qscale_mode: QScaleMode = QScaleMode.HALF_MW
    s: float = 1.0 / 3.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.m_w < 3 or self.m_w % 2 == 0:
            raise ValueError(f"m_w must be an odd integer >= 3, got {self.m_w}")
        if self.m_a < 2:
            raise ValueError(f"m_a must be >= 2, got {self.m_a}")
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def weight_qscale(self) -> float:
        if self.qscale_mode is QScaleMode.HALF_MW:
            return self.m_w / 2.0
        return (self.m_w - 1) / 2.0


def round_half_away(z):
    """Round to nearest integer, ties away from zero (keeps the weight lattice
    odd-symmetric about 0)."""
    z = np.asarray(z)
    return np.copysign(np.floor(np.abs(z) + 0.5), z)


def _check_finite(z, name: str):
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} must be finite")


def scaled_round_clip(z, qscale: float, lo: float, hi: float):
    """clamp(round(qscale * z) / qscale, lo, hi)."""
    if not qscale > 0:
        raise ValueError(f"qscale must be positive, got {qscale}")
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    _check_finite(z, "quantizer input")
    return np.clip(round_half_away(np.multiply(qscale, z)) / qscale, lo, hi)


def quantize_weight(w_hat, cfg: QuantConfig):
    """Quantize a (standardized) weight onto the signed lattice in [-1, 1]."""
    return scaled_round_clip(np.multiply(cfg.s, w_hat), cfg.weight_qscale, -1.0, 1.0)


def quantize_activation(a_hat, m_a: int):
    """Quantize an activation onto the m_a-state lattice {0, ..., 1}."""
    if m_a < 2:
        raise ValueError(f"m_a must be >= 2, got {m_a}")
    return scaled_round_clip(a_hat, float(m_a - 1), 0.0, 1.0)


def weight_surrogate_grad(w_hat, cfg: QuantConfig):
    """Straight-through band: 1 where |s * w_hat| < 1 (strict), else 0."""
    w_hat = np.asarray(w_hat)
    return (np.abs(cfg.s * w_hat) < 1.0).astype(np.float64)


def thresholds(m_a: int) -> np.ndarray:
    """Inputs at which the activation quantizer switches state m -> m+1:
    b_m = (m - 1 + 1/2) / (m_a - 1), m = 1..m_a-1."""
    if m_a < 2:
        raise ValueError(f"m_a must be >= 2, got {m_a}")
    m = np.arange(1, m_a)
    return ((m - 1) + 0.5) / (m_a - 1)


def scaled_sigmoid(z, alpha: float):
    """sigma_alpha(z) = 1 / (1 + exp(-z / alpha))."""
    return expit(np.asarray(z, dtype=np.float64) / alpha)


def activation_surrogate_grad(a_hat, m_a: int, alpha: float):
    """Sum over thresholds of d/dz sigma_alpha(z - b_m); strictly positive."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    a_hat = np.asarray(a_hat, dtype=np.float64)
    b = thresholds(m_a)
    p = scaled_sigmoid(a_hat[..., None] - b, alpha)
    return np.sum(p * (1.0 - p) / alpha, axis=-1)


def quantize_tensor_forward(t: np.ndarray, kind: QuantKind, cfg: QuantConfig):
    """Elementwise quantization of a tensor; returns the quantized tensor and
    the pre-quantization values saved for the surrogate backward."""
    if kind is QuantKind.WEIGHT:
        q = quantize_weight(t, cfg)
    else:
        q = quantize_activation(t, cfg.m_a)
    return q.astype(t.dtype), t.copy()


def quantize_tensor_backward(saved: np.ndarray, upstream: np.ndarray,
                             kind: QuantKind, cfg: QuantConfig) -> np.ndarray:
    """upstream * surrogate(saved), elementwise."""
    if saved.shape != upstream.shape:
        raise ValueError(f"shape mismatch: saved {saved.shape} vs upstream {upstream.shape}")
    if kind is QuantKind.WEIGHT:
        g = weight_surrogate_grad(saved, cfg)
    else:
        g = activation_surrogate_grad(saved, cfg.m_a, cfg.alpha)
    return (upstream * g).astype(upstream.dtype)
