"""Tensor container and convolution geometry."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError

DTYPE = np.float32


class Tensor:
    """Dense float32 array with an optional accumulated-gradient buffer.

    Kernels in :mod:`cardionet.kernels` work on plain ndarrays; ``Tensor`` is
    the holder for trainable parameters and running statistics, where a
    gradient buffer and a stable name matter.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=True):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, *shape, requires_grad=True):
        return cls(np.zeros(shape, dtype=DTYPE), requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def is_finite(self):
        ok = bool(np.isfinite(self.data).all())
        if self.grad is not None:
            ok = ok and bool(np.isfinite(self.grad).all())
        return ok

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution: square-or-rectangular kernel, stride, symmetric padding."""

    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigError(f"kernel extents must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")

    @classmethod
    def same(cls, in_channels, out_channels, kernel=3):
        return cls(in_channels, out_channels, kernel, kernel, 1, kernel // 2)

    def conv_output_hw(self, h, w):
        """Output extents of a forward convolution; errors if they are not positive integers."""
        return (_conv_extent(h, self.kernel_h, self.stride, self.padding, "height"),
                _conv_extent(w, self.kernel_w, self.stride, self.padding, "width"))

    def transposed_output_hw(self, h, w):
        oh = (h - 1) * self.stride + self.kernel_h - 2 * self.padding
        ow = (w - 1) * self.stride + self.kernel_w - 2 * self.padding
        if oh < 1 or ow < 1:
            raise ConfigError(f"transposed convolution output would be {oh}x{ow}")
        return oh, ow


def _conv_extent(n, k, s, p, axis):
    span = n + 2 * p - k
    if span < 0 or span % s:
        raise ConfigError(
            f"{axis}: ({n} + 2*{p} - {k})/{s} + 1 is not a positive integer")
    return span // s + 1


@dataclass
class RunningStats:
    """Batch-norm running mean/variance, mutated only in train mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels, momentum=0.1):
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE), momentum)

