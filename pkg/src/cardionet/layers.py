"""Stateful layer wrappers around :mod:`cardionet.kernels`.

Each layer owns its parameters as :class:`Tensor` objects, caches whatever
its backward pass needs during ``forward``, and accumulates parameter
gradients into ``Tensor.grad`` during ``backward``. Calling ``backward``
without a preceding train-mode ``forward`` raises :class:`StateError`.
"""
from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import StateError
from .tensor import DTYPE, ConvSpec, RunningStats, Tensor


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Layer:
    name = "layer"

    def __init__(self):
        self._cache = None

    def params(self):
        """(suffix, Tensor) pairs, in a stable order."""
        return []

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Conv2d(Layer):
    def __init__(self, spec: ConvSpec, rng, name="conv"):
        super().__init__()
        self.spec, self.name = spec, name
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        self.weight = Tensor(he_uniform(
            rng, (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w), fan_in))
        self.bias = Tensor.zeros(spec.out_channels)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, record=True):
        if record:
            self._cache = x
        return K.conv2d(x, self.weight.data, self.bias.data, self.spec)

    def backward(self, dout):
        x = self._take_cache()
        dx, dw, db = K.conv2d_backward(dout, x, self.weight.data, self.spec)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class ConvTranspose2d(Layer):
    def __init__(self, spec: ConvSpec, rng, name="up"):
        super().__init__()
        self.spec, self.name = spec, name
        # each output pixel receives kh*kw/stride^2 taps per input channel
        fan_in = max(1, spec.in_channels * spec.kernel_h * spec.kernel_w // spec.stride ** 2)
        self.weight = Tensor(he_uniform(
            rng, (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w), fan_in))
        self.bias = Tensor.zeros(spec.out_channels)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, record=True):
        if record:
            self._cache = x
        return K.transposed_conv2d(x, self.weight.data, self.bias.data, self.spec)

    def backward(self, dout):
        x = self._take_cache()
        dx, dw, db = K.transposed_conv2d_backward(dout, x, self.weight.data, self.spec)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class BatchNorm2d(Layer):
    def __init__(self, channels, eps=1e-5, momentum=0.1, name="bn"):
        super().__init__()
        self.name, self.eps, self.momentum = name, eps, momentum
        self.gamma = Tensor(np.ones(channels, dtype=DTYPE))
        self.beta = Tensor.zeros(channels)
        self.running_mean = Tensor.zeros(channels, requires_grad=False)
        self.running_var = Tensor(np.ones(channels, dtype=DTYPE), requires_grad=False)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta),
                ("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, mode="train", record=True):
        # RunningStats views the Tensor buffers, so train mode updates them in place
        stats = RunningStats(self.running_mean.data, self.running_var.data, self.momentum)
        out, cache = K.batch_norm(x, self.gamma.data, self.beta.data, self.eps, mode, stats)
        if record:
            self._cache = cache
        return out

    def backward(self, dout):
        cache = self._take_cache()
        dx, dg, db = K.batch_norm_backward(dout, cache, self.gamma.data)
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        return dx


class ReLU(Layer):
    name = "relu"

    def forward(self, x, record=True):
        if record:
            self._cache = x
        return K.relu(x)

    def backward(self, dout):
        return K.relu_backward(dout, self._take_cache())


class MaxPool2d(Layer):
    name = "pool"

    def forward(self, x, record=True):
        out, idx = K.pool2d(x, "max", return_indices=True)
        if record:
            self._cache = (x.shape, idx)
        return out

    def backward(self, dout):
        shape, idx = self._take_cache()
        return K.pool2d_backward(dout, shape, "max", idx)


class Dense(Layer):
    def __init__(self, d_in, d_out, rng, name="dense"):
        super().__init__()
        self.name = name
        self.weight = Tensor(he_uniform(rng, (d_in, d_out), d_in))
        self.bias = Tensor.zeros(d_out)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, record=True):
        if record:
            self._cache = x
        return K.dense(x, self.weight.data, self.bias.data)

    def backward(self, dout):
        x = self._take_cache()
        dx, dw, db = K.dense_backward(dout, x, self.weight.data)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class ConvBlock(Layer):
    """``n`` repetitions of same-padded conv -> batch norm -> ReLU."""

    def __init__(self, in_ch, out_ch, n, kernel, rng, eps=1e-5, momentum=0.1, name="block"):
        super().__init__()
        self.name = name
        self.stages = []
        for j in range(n):
            spec = ConvSpec.same(in_ch if j == 0 else out_ch, out_ch, kernel)
            self.stages.append((Conv2d(spec, rng, f"conv{j}"),
                                BatchNorm2d(out_ch, eps, momentum, f"bn{j}"),
                                ReLU()))

    def params(self):
        out = []
        for conv, bn, _ in self.stages:
            out += [(f"{conv.name}.{k}", t) for k, t in conv.params()]
            out += [(f"{bn.name}.{k}", t) for k, t in bn.params()]
        return out

    def forward(self, x, mode="train", record=True):
        for conv, bn, act in self.stages:
            x = act.forward(bn.forward(conv.forward(x, record), mode, record), record)
        return x

    def backward(self, dout):
        for conv, bn, act in reversed(self.stages):
            dout = conv.backward(bn.backward(act.backward(dout)))
        return dout
