"""maqd-kit: quantization-aware training with layer-batch normalization,
weight standardization, scaled round-clip quantizers, surrogate gradients,
and a folded-normalization inference runtime."""

from .normalization import Mode, NormKind
from .quantizer import QScaleMode, QuantConfig, QuantKind

__all__ = ["Mode", "NormKind", "QScaleMode", "QuantConfig", "QuantKind"]

__version__ = "0.1.0"
