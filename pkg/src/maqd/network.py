"""Model assembly: convolution, pooling, layer graph, and the three
architectures (VGG string, pre-activation ResNet block grammar, 9-layer CNN).

Layers record their forward caches on themselves (the tape); backward walks
the layer list in reverse, composing each layer's exact or surrogate
backward. Convolutions are cross-correlations computed via im2col, so their
backwards are exact transposes.

Quantized convolutions evaluate as  quantize(standardize(raw_weight)); the
optimizer updates the raw (latent) full-precision weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .normalization import (Mode, NormKind, NormLayerState, WSState,
                            norm_backward, norm_forward, weight_standardize,
                            weight_standardize_backward)
from .quantizer import (QuantConfig, QuantKind, quantize_tensor_backward,
                        quantize_tensor_forward)


@dataclass
class Param:
    """One trainable array with its gradient accumulator."""

    name: str
    data: np.ndarray
    grad: np.ndarray = None
    decay: bool = False  # weight decay applies to conv weights only

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0


def _nbytes(obj) -> int:
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, (tuple, list)):
        return sum(_nbytes(o) for o in obj)
    if hasattr(obj, "__dict__"):
        return sum(_nbytes(v) for v in vars(obj).values())
    return 0


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(n, c, h, w) -> (n*ho*wo, c*k*k) patch matrix plus output extents."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    if hp < k or wp < k:
        raise ValueError(f"spatial extent {h}x{w} too small for kernel {k}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # (n, c, ho, wo, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(grad_cols: np.ndarray, x_shape, k: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    """Transpose of _im2col: scatter-add patch gradients back to the input."""
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_cols.dtype)
    g = grad_cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(k):
        for kj in range(k):
            gx[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += g[:, :, :, :, ki, kj]
    if pad:
        gx = gx[:, :, pad:h + pad, pad:w + pad]
    return gx


class Conv2d:
    """3x3 (pad 1) or 1x1 (pad 0) cross-correlation, stride 1 or 2, no bias.

    Optional weight standardization and weight quantization are folded into
    the effective weight used by the forward pass.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, *,
                 rng: np.random.Generator, weight_standardized: bool = True,
                 quant: QuantConfig | None = None, ws_eps: float = 1e-10,
                 dtype=np.float64):
        if kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {kernel}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.padding = 1 if kernel == 3 else 0
        self.weight_standardized = weight_standardized
        self.quant = quant
        self.ws_eps = ws_eps
        fan_in = in_ch * kernel * kernel
        init = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        self.weight = Param(name="weight", data=init.astype(dtype), decay=True)
        self.cache = None

    def parameters(self):
        return [self.weight]

    def effective_weight(self):
        """Weight actually used by the forward pass, with the WS/quantizer
        caches needed for backward."""
        w2d = self.weight.data.reshape(self.out_ch, -1)
        ws_cache = None
        if self.weight_standardized:
            w2d, ws_cache = weight_standardize(WSState(w2d, eps=self.ws_eps))
        q_saved = None
        if self.quant is not None:
            w2d, q_saved = quantize_tensor_forward(w2d, QuantKind.WEIGHT, self.quant)
        return w2d, ws_cache, q_saved

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        w2d, ws_cache, q_saved = self.effective_weight()
        cols, ho, wo = _im2col(x, self.kernel, self.stride, self.padding)
        y = cols @ w2d.T
        n = x.shape[0]
        y = y.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        if mode is Mode.TRAIN:
            self.cache = (x.shape, cols, w2d, ws_cache, q_saved, ho, wo)
        return np.ascontiguousarray(y)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self.cache is None:
            raise RuntimeError("backward before forward")
        x_shape, cols, w2d, ws_cache, q_saved, ho, wo = self.cache
        n = upstream.shape[0]
        g2 = upstream.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_ch)
        grad_w2d = np.ascontiguousarray(g2.T) @ cols
        grad_cols = g2 @ w2d
        grad_x = _col2im(grad_cols, x_shape, self.kernel, self.stride, self.padding, ho, wo)
        if q_saved is not None:
            grad_w2d = quantize_tensor_backward(q_saved, grad_w2d, QuantKind.WEIGHT, self.quant)
        if ws_cache is not None:
            grad_w2d = weight_standardize_backward(ws_cache, grad_w2d)
        self.weight.grad += grad_w2d.reshape(self.weight.data.shape)
        return grad_x

    def cache_nbytes(self) -> int:
        return _nbytes(self.cache)


class NormLayer:
    """Wraps a NormLayerState as a graph node."""

    def __init__(self, kind: NormKind, channels: int, eps: float = 1e-5,
                 ema_rate: float = 0.1, dtype=np.float64):
        self.state = NormLayerState.create(kind, channels, eps=eps,
                                           ema_rate=ema_rate, dtype=dtype)
        self.g = Param(name="g", data=self.state.g)
        self.b = Param(name="b", data=self.state.b)
        self.cache = None

    def parameters(self):
        return [self.g, self.b]

    def forward(self, x, mode):
        y, cache = norm_forward(x, self.state, mode)
        if mode is Mode.TRAIN:
            self.cache = cache
        return y

    def backward(self, upstream):
        grad_x, grad_g, grad_b = norm_backward(self.cache, upstream)
        self.g.grad += grad_g
        self.b.grad += grad_b
        return grad_x

    def cache_nbytes(self):
        return _nbytes(self.cache)


class ActQuant:
    """Quantized activation with scaled-sigmoid surrogate backward."""

    def __init__(self, cfg: QuantConfig):
        self.cfg = cfg
        self.cache = None
        self.record = False
        self.last_output = None

    def parameters(self):
        return []

    def forward(self, x, mode):
        y, saved = quantize_tensor_forward(x, QuantKind.ACTIVATION, self.cfg)
        if mode is Mode.TRAIN:
            self.cache = saved
        if self.record:
            self.last_output = y
        return y

    def backward(self, upstream):
        return quantize_tensor_backward(self.cache, upstream, QuantKind.ACTIVATION, self.cfg)

    def cache_nbytes(self):
        return _nbytes(self.cache)


class ReLU:
    def __init__(self):
        self.cache = None
        self.record = False
        self.last_output = None

    def parameters(self):
        return []

    def forward(self, x, mode):
        y = np.maximum(x, 0.0)
        if mode is Mode.TRAIN:
            self.cache = x > 0
        if self.record:
            self.last_output = y
        return y

    def backward(self, upstream):
        return upstream * self.cache

    def cache_nbytes(self):
        return _nbytes(self.cache)


class AvgPool2:
    """Non-overlapping 2x2 mean pooling; requires even spatial extents."""

    def __init__(self):
        self.cache = None

    def parameters(self):
        return []

    def forward(self, x, mode):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"average pooling needs even spatial extents, got {h}x{w}")
        y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        if mode is Mode.TRAIN:
            self.cache = x.shape
        return y.astype(x.dtype)

    def backward(self, upstream):
        n, c, h, w = self.cache
        g = np.repeat(np.repeat(upstream, 2, axis=2), 2, axis=3) * 0.25
        return g.astype(upstream.dtype)

    def cache_nbytes(self):
        return 0


class GlobalAvgPool:
    """Mean over all spatial positions; flattens (n, c, h, w) -> (n, c)."""

    def __init__(self):
        self.cache = None

    def parameters(self):
        return []

    def forward(self, x, mode):
        if mode is Mode.TRAIN:
            self.cache = x.shape
        return np.mean(x, axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(self, upstream):
        n, c, h, w = self.cache
        g = np.broadcast_to(upstream[:, :, None, None] / (h * w), (n, c, h, w))
        return np.ascontiguousarray(g).astype(upstream.dtype)

    def cache_nbytes(self):
        return 0


class ResidualBlock:
    """Sum of two pre-activation branches evaluated on the same input."""

    def __init__(self, s_branch: list, f_branch: list):
        self.s_branch = s_branch
        self.f_branch = f_branch

    def parameters(self):
        return [p for layer in self.s_branch + self.f_branch for p in layer.parameters()]

    def forward(self, x, mode):
        ys = x
        for layer in self.s_branch:
            ys = layer.forward(ys, mode)
        yf = x
        for layer in self.f_branch:
            yf = layer.forward(yf, mode)
        return ys + yf

    def backward(self, upstream):
        gs = upstream
        for layer in reversed(self.s_branch):
            gs = layer.backward(gs)
        gf = upstream
        for layer in reversed(self.f_branch):
            gf = layer.backward(gf)
        return gs + gf

    def cache_nbytes(self):
        return sum(layer.cache_nbytes() for layer in self.s_branch + self.f_branch)


def _walk(layers):
    for layer in layers:
        if isinstance(layer, ResidualBlock):
            yield from _walk(layer.s_branch)
            yield from _walk(layer.f_branch)
        else:
            yield layer


class ModelGraph:
    """Ordered layer list with a recorded forward tape."""

    def __init__(self, layers: list, arch: str, num_classes: int,
                 quant: QuantConfig | None, norm_kind: NormKind):
        self.layers = layers
        self.arch = arch
        self.num_classes = num_classes
        self.quant = quant
        self.norm_kind = norm_kind
        self._forward_done = False

    def parameters(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.parameters()]

    def all_layers(self):
        return list(_walk(self.layers))

    def conv_layers(self) -> list[Conv2d]:
        return [l for l in self.all_layers() if isinstance(l, Conv2d)]

    def activation_layers(self):
        return [l for l in self.all_layers() if isinstance(l, (ActQuant, ReLU))]

    def forward(self, x: np.ndarray, mode: Mode = Mode.TRAIN) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, mode)
        self._forward_done = mode is Mode.TRAIN
        return x  # (n, num_classes) after the trailing global pool

    def backward(self, grad_logits: np.ndarray):
        if not self._forward_done:
            raise RuntimeError("backward requires a preceding TRAIN-mode forward")
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._forward_done = False
        return g

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def tape_nbytes(self) -> int:
        return sum(layer.cache_nbytes() for layer in self.layers)


def _conv_norm_act(layers, in_ch, out_ch, kernel, stride, *, norm_kind, quant,
                   rng, dtype, use_ws):
    layers.append(Conv2d(in_ch, out_ch, kernel, stride, rng=rng,
                         weight_standardized=use_ws, quant=quant, dtype=dtype))
    layers.append(NormLayer(norm_kind, out_ch, dtype=dtype))
    layers.append(ActQuant(quant) if quant is not None else ReLU())


def _head(layers, in_ch, num_classes, *, quant, quantize_head, rng, dtype, use_ws):
    head_quant = quant if (quant is not None and quantize_head) else None
    layers.append(Conv2d(in_ch, num_classes, kernel=1, stride=1, rng=rng,
                         weight_standardized=use_ws, quant=head_quant, dtype=dtype))
    layers.append(GlobalAvgPool())


# Conv plans: each entry is a (channels, repeat) group; "AP" inserts pooling.
_VGG_PLAN = [(64, 2), (128, 2), "AP", (256, 4), "AP", (512, 4), "AP", (512, 4)]
_VGG_MINI_PLAN = [(16, 2), "AP", (32, 2), "AP", (64, 2)]
_CNN9_PLAN = [(64, 2), "AP", (128, 2), "AP", (256, 2), "AP", (512, 2)]
_CNN9_MINI_PLAN = [(32, 2), "AP", (64, 2), "AP", (128, 2), "AP", (256, 2)]


def _build_plain(plan, num_classes, *, norm_kind, quant, quantize_head, seed,
                 dtype, use_ws, in_channels, arch):
    rng = np.random.default_rng(seed)
    layers: list = []
    ch = in_channels
    for entry in plan:
        if entry == "AP":
            layers.append(AvgPool2())
            continue
        out_ch, repeat = entry
        for _ in range(repeat):
            _conv_norm_act(layers, ch, out_ch, 3, 1, norm_kind=norm_kind,
                           quant=quant, rng=rng, dtype=dtype, use_ws=use_ws)
            ch = out_ch
    _head(layers, ch, num_classes, quant=quant, quantize_head=quantize_head,
          rng=rng, dtype=dtype, use_ws=use_ws)
    return ModelGraph(layers, arch, num_classes, quant, norm_kind)


def build_vgg(num_classes: int = 10, *, quant: QuantConfig | None = None,
              norm_kind: NormKind = NormKind.LBN, quantize_head: bool = True,
              seed: int = 42, dtype=np.float64, use_ws: bool = True,
              in_channels: int = 3, mini: bool = False) -> ModelGraph:
    """VGG-style stack: 16 conv layers (6 in the mini variant) plus a 1x1
    classifier head followed by global average pooling."""
    plan = _VGG_MINI_PLAN if mini else _VGG_PLAN
    return _build_plain(plan, num_classes, norm_kind=norm_kind, quant=quant,
                        quantize_head=quantize_head, seed=seed, dtype=dtype,
                        use_ws=use_ws, in_channels=in_channels,
                        arch="vgg-mini" if mini else "vgg")


def build_cnn9(num_classes: int = 100, *, quant: QuantConfig | None = None,
               norm_kind: NormKind = NormKind.LBN, quantize_head: bool = True,
               seed: int = 42, dtype=np.float64, use_ws: bool = True,
               in_channels: int = 3, mini: bool = False) -> ModelGraph:
    """9-conv CNN (8 body convs + head) used by the normalization benchmark."""
    plan = _CNN9_MINI_PLAN if mini else _CNN9_PLAN
    return _build_plain(plan, num_classes, norm_kind=norm_kind, quant=quant,
                        quantize_head=quantize_head, seed=seed, dtype=dtype,
                        use_ws=use_ws, in_channels=in_channels,
                        arch="cnn9-mini" if mini else "cnn9")


# (channels, stride) per residual block.
_RESNET_PLAN = [(64, 1), (128, 1), (256, 2), (256, 2), (512, 2), (512, 2), (512, 2), (512, 2)]
_RESNET_MINI_PLAN = [(16, 1), (32, 2), (64, 2)]


def _res_branch(in_ch, out_ch, n_convs, *, norm_kind, quant, rng, dtype, use_ws):
    layers: list = []
    ch = in_ch
    for _ in range(n_convs):
        layers.append(NormLayer(norm_kind, ch, dtype=dtype))
        layers.append(ActQuant(quant) if quant is not None else ReLU())
        layers.append(Conv2d(ch, out_ch, 3, 1, rng=rng, weight_standardized=use_ws,
                             quant=quant, dtype=dtype))
        ch = out_ch
    layers.append(NormLayer(norm_kind, out_ch, dtype=dtype))
    return layers


def build_preact_resnet(num_classes: int = 10, *, quant: QuantConfig | None = None,
                        norm_kind: NormKind = NormKind.LBN, quantize_head: bool = True,
                        seed: int = 42, dtype=np.float64, use_ws: bool = True,
                        in_channels: int = 3, input_hw: int = 32,
                        mini: bool = False) -> ModelGraph:
    """Pre-activation residual net built from two-branch blocks.

    Each block sums a long branch (norm-act-conv-norm-act-conv-norm) and a
    short branch (norm-act-conv-norm). Stride-2 blocks downsample with a 2x2
    average pool in front of the block and keep stride-1 convolutions; the
    pool is skipped once the spatial extent has collapsed to 1.
    """
    plan = _RESNET_MINI_PLAN if mini else _RESNET_PLAN
    rng = np.random.default_rng(seed)
    layers: list = []
    ch = in_channels
    extent = input_hw
    for out_ch, stride in plan:
        if stride == 2 and extent > 1:
            layers.append(AvgPool2())
            extent //= 2
        s_branch = _res_branch(ch, out_ch, 2, norm_kind=norm_kind, quant=quant,
                               rng=rng, dtype=dtype, use_ws=use_ws)
        f_branch = _res_branch(ch, out_ch, 1, norm_kind=norm_kind, quant=quant,
                               rng=rng, dtype=dtype, use_ws=use_ws)
        layers.append(ResidualBlock(s_branch, f_branch))
        ch = out_ch
    _head(layers, ch, num_classes, quant=quant, quantize_head=quantize_head,
          rng=rng, dtype=dtype, use_ws=use_ws)
    return ModelGraph(layers, "preact-mini" if mini else "preact_resnet",
                      num_classes, quant, norm_kind)


_BUILDERS = {
    "vgg": lambda **kw: build_vgg(mini=False, **kw),
    "vgg-mini": lambda **kw: build_vgg(mini=True, **kw),
    "preact_resnet": lambda **kw: build_preact_resnet(mini=False, **kw),
    "preact-mini": lambda **kw: build_preact_resnet(mini=True, **kw),
    "cnn9": lambda **kw: build_cnn9(mini=False, **kw),
    "cnn9-mini": lambda **kw: build_cnn9(mini=True, **kw),
}


def build_model(arch: str, num_classes: int, **kwargs) -> ModelGraph:
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(_BUILDERS)}")
    return _BUILDERS[arch](num_classes=num_classes, **kwargs)


def model_forward(graph: ModelGraph, x: np.ndarray, mode: Mode = Mode.TRAIN) -> np.ndarray:
    return graph.forward(x, mode)


def model_backward(graph: ModelGraph, grad_logits: np.ndarray):
    return graph.backward(grad_logits)
