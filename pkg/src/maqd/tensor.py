"""Dense rank-4 tensor kernels.

Everything in the engine moves through contiguous (batch, channel, height,
width) arrays. Tensors are plain numpy ndarrays in row-major (n, c, h, w)
order; this module pins the layout convention and provides the handful of
kernels the rest of the engine builds on. Reductions accumulate in 64-bit
regardless of the element dtype.
"""

from __future__ import annotations

from typing import Callable, Iterable, NamedTuple

import numpy as np

# Axis names in layout order.
AXES = ("n", "c", "h", "w")

# 64-bit for verification work, 32-bit for training throughput.
TEST_DTYPE = np.float64
TRAIN_DTYPE = np.float32

# Element-count ceiling so n*c*h*w always fits comfortably in an index.
_MAX_ELEMENTS = 2**40


class Shape(NamedTuple):
    """Extents of a rank-4 tensor in (n, c, h, w) order."""

    n: int
    c: int
    h: int
    w: int

    def count(self) -> int:
        return self.n * self.c * self.h * self.w

    def validate(self) -> None:
        for name, extent in zip(AXES, self):
            if not isinstance(extent, (int, np.integer)) or extent < 1:
                raise ValueError(f"axis {name!r} extent must be a positive integer, got {extent}")
        if self.count() > _MAX_ELEMENTS:
            raise ValueError(f"element count {self.count()} exceeds supported maximum")


def zeros(shape: Shape | tuple[int, int, int, int], dtype=TEST_DTYPE) -> np.ndarray:
    """Allocate a zero-filled rank-4 tensor."""
    shape = Shape(*shape)
    shape.validate()
    return np.zeros(shape, dtype=dtype)


def elementwise_map(t: np.ndarray, f: Callable[[float], float]) -> np.ndarray:
    """Apply a scalar function to every element, preserving shape and dtype."""
    out = np.empty_like(t)
    flat_in = t.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = f(flat_in[i])
    return out


def _axis_indices(axes: Iterable[str]) -> tuple[int, ...]:
    idx = []
    for a in axes:
        if a not in AXES:
            raise ValueError(f"unknown axis {a!r}; expected one of {AXES}")
        idx.append(AXES.index(a))
    return tuple(sorted(set(idx)))


def reduce_mean(t: np.ndarray, axes: Iterable[str]) -> np.ndarray:
    """Mean over the named axes; reduced axes keep extent 1.

    Accumulates in float64 (numpy pairwise summation) and casts back to the
    input dtype.
    """
    idx = _axis_indices(axes)
    if not idx:
        return t.copy()
    return np.mean(t, axis=idx, keepdims=True, dtype=np.float64).astype(t.dtype)
