"""Forward and backward kernels for the CNN / U-Net primitives.

Every function here is pure over its array arguments (the only mutation is
the explicitly passed batch-norm running statistics) and keeps the dtype of
its inputs, so the same code runs in float32 for training and float64 for
finite-difference checks.

Layouts: activations are ``(N, C, H, W)``; convolution weights are
``(F, C, kh, kw)``; transposed-convolution weights are ``(C_in, F, kh, kw)``.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from .errors import DimensionError
from .tensor import ConvSpec, RunningStats


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _spec_from_weights(w, stride, padding, transposed=False):
    if transposed:
        c, f = w.shape[0], w.shape[1]
    else:
        f, c = w.shape[0], w.shape[1]
    return ConvSpec(c, f, w.shape[2], w.shape[3], stride, padding)


# ---------------------------------------------------------------- convolution

def conv2d(x, w, b=None, spec: Optional[ConvSpec] = None):
    """Cross-correlate ``x`` with ``w`` (zero padded) and add ``b``.

    The sum over kernel offsets is done as ``kh * kw`` channel matmuls, which
    avoids materializing the full im2col matrix.
    """
    _check_4d(x)
    _check_4d(w, "weights")
    if spec is None:
        spec = _spec_from_weights(w, 1, 0)
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    if c != wc:
        raise DimensionError(f"channel axis: input has C={c}, weights expect C={wc}")
    if (f, c, kh, kw) != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise DimensionError(
            f"weights shape {w.shape} disagrees with spec "
            f"(F={spec.out_channels}, C={spec.in_channels}, {spec.kernel_h}x{spec.kernel_w})")
    if b is not None and b.shape != (f,):
        raise DimensionError(f"bias shape {b.shape} != ({f},)")
    ho, wo = spec.conv_output_hw(h, wd)
    s = spec.stride
    xp = _pad(x, spec.padding)
    out = np.zeros((f, n, ho, wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
            out += np.tensordot(w[:, :, i, j], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.reshape(1, f, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(dout, x, w, spec: Optional[ConvSpec] = None):
    """Return ``(dx, dw, db)`` for :func:`conv2d`."""
    if spec is None:
        spec = _spec_from_weights(w, 1, 0)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = spec.conv_output_hw(h, wd)
    if dout.shape != (n, f, ho, wo):
        raise DimensionError(f"output gradient shape {dout.shape} != {(n, f, ho, wo)}")
    s, p = spec.stride, spec.padding
    xp = _pad(x, p)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            window = (slice(None), slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
            dw[:, :, i, j] = np.tensordot(dout, xp[window], axes=([0, 2, 3], [0, 2, 3]))
            dxp[window] += np.tensordot(w[:, :, i, j], dout, axes=([0], [1])).transpose(1, 0, 2, 3)
    dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
    db = dout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


def transposed_conv2d(x, w, b=None, spec: Optional[ConvSpec] = None):
    """Scatter-accumulate each input element times the kernel into the output.

    This is the adjoint of :func:`conv2d` with the same weights and geometry.
    Output extent is ``(H - 1) * stride + kernel - 2 * padding``.
    """
    _check_4d(x)
    _check_4d(w, "weights")
    if spec is None:
        spec = _spec_from_weights(w, 1, 0, transposed=True)
    n, c, h, wd = x.shape
    wc, f, kh, kw = w.shape
    if c != wc:
        raise DimensionError(f"channel axis: input has C={c}, weights expect C={wc}")
    if (wc, f, kh, kw) != (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w):
        raise DimensionError(f"weights shape {w.shape} disagrees with spec")
    if b is not None and b.shape != (f,):
        raise DimensionError(f"bias shape {b.shape} != ({f},)")
    ho, wo = spec.transposed_output_hw(h, wd)
    s, p = spec.stride, spec.padding
    full = np.zeros((n, f, (h - 1) * s + kh, (wd - 1) * s + kw), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(w[:, :, i, j], x, axes=([0], [1]))  # (F, N, H, W)
            full[:, :, i:i + s * h:s, j:j + s * wd:s] += contrib.transpose(1, 0, 2, 3)
    out = full[:, :, p:p + ho, p:p + wo]
    if b is not None:
        out = out + b.reshape(1, f, 1, 1)
    return np.ascontiguousarray(out)


def transposed_conv2d_backward(dout, x, w, spec: Optional[ConvSpec] = None):
    """Return ``(dx, dw, db)`` for :func:`transposed_conv2d`."""
    if spec is None:
        spec = _spec_from_weights(w, 1, 0, transposed=True)
    n, c, h, wd = x.shape
    _, f, kh, kw = w.shape
    ho, wo = spec.transposed_output_hw(h, wd)
    if dout.shape != (n, f, ho, wo):
        raise DimensionError(f"output gradient shape {dout.shape} != {(n, f, ho, wo)}")
    s, p = spec.stride, spec.padding
    full = np.zeros((n, f, (h - 1) * s + kh, (wd - 1) * s + kw), dtype=dout.dtype)
    full[:, :, p:p + ho, p:p + wo] = dout
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            g = full[:, :, i:i + s * h:s, j:j + s * wd:s]
            dx += np.tensordot(w[:, :, i, j], g, axes=([1], [1])).transpose(1, 0, 2, 3)
            dw[:, :, i, j] = np.tensordot(x, g, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


# -------------------------------------------------------------------- pooling

POOL_MODES = ("max", "average", "sum")


def _windows(x):
    _check_4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"2x2 pooling needs even height and width, got {h}x{w}")
    # (N, C, H/2, W/2, 4) with window elements in row-major order
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)


def pool2d(x, mode="max", return_indices=False):
    """2x2 / stride-2 pooling. ``max`` can also return the per-window argmax (0..3)."""
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    win = _windows(x)
    if mode == "max":
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return (out, idx) if return_indices else out
    if return_indices:
        raise ValueError("indices are only recorded for max pooling")
    if mode == "sum":
        return win.sum(axis=-1)
    return win.mean(axis=-1)


def pool2d_backward(dout, input_shape, mode="max", indices=None):
    n, c, h, w = input_shape
    if dout.shape != (n, c, h // 2, w // 2):
        raise DimensionError(f"output gradient shape {dout.shape} does not match input {input_shape}")
    if mode == "max":
        if indices is None:
            raise ValueError("max-pool backward needs the recorded argmax indices")
        win = np.zeros(dout.shape + (4,), dtype=dout.dtype)
        np.put_along_axis(win, indices[..., None], dout[..., None], axis=-1)
    elif mode == "sum":
        win = np.repeat(dout[..., None], 4, axis=-1)
    elif mode == "average":
        win = np.repeat(dout[..., None] / 4, 4, axis=-1)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


# ---------------------------------------------------------------- activations

def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    """Logistic function, clipped so the result stays inside the open interval (0, 1)."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
    fi = np.finfo(out.dtype if out.dtype.kind == "f" else np.float64)
    return np.clip(out, fi.tiny, 1 - fi.epsneg)


def sigmoid_backward(dout, y):
    """Gradient given the sigmoid *output* ``y``."""
    return dout * y * (1 - y)


def activation(x, kind="relu"):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------- batch norm

class BatchNormCache(NamedTuple):
    xhat: np.ndarray
    invstd: np.ndarray
    mode: str


def batch_norm(x, gamma, beta, eps=1e-5, mode="train", stats: Optional[RunningStats] = None):
    """Per-channel normalization over (N, H, W).

    Train mode uses batch statistics and, when ``stats`` is given, folds them
    into the running averages (unbiased variance, momentum ``stats.momentum``).
    Eval mode normalizes with ``stats``. Returns ``(out, cache)``.
    """
    _check_4d(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    m = n * h * w
    if m < 1:
        raise DimensionError("batch norm over an empty channel slab")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if stats is not None:
            mom = stats.momentum
            unbiased = var * (m / (m - 1)) if m > 1 else var
            stats.mean[...] = (1 - mom) * stats.mean + mom * mean
            stats.var[...] = (1 - mom) * stats.var + mom * unbiased
    elif mode == "eval":
        if stats is None:
            raise ValueError("eval-mode batch norm needs running statistics")
        mean, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    invstd = 1 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    return out.astype(x.dtype, copy=False), BatchNormCache(xhat, invstd, mode)


def batch_norm_backward(dout, cache: BatchNormCache, gamma):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, invstd, mode = cache
    c = gamma.shape[0]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(1, c, 1, 1)
    if mode == "eval":
        return dxhat * invstd.reshape(1, c, 1, 1), dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (invstd.reshape(1, c, 1, 1) / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------- dense

def dense(x, w, b):
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"dense expects 2-D input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"inner extents differ: input D={x.shape[1]}, weights D={w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b


def dense_backward(dout, x, w):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# ------------------------------------------------------------ channel concat

def concat_channels(a, b):
    _check_4d(a, "a")
    _check_4d(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(
            f"concat needs equal N, H, W; got {a.shape} and {b.shape} (crop the skip first)")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(dout, ca):
    return dout[:, :ca], dout[:, ca:]


def center_crop_tensor(x, h, w):
    """Centered spatial crop; an odd margin leaves the extra row/column at the bottom/right."""
    _check_4d(x)
    H, W = x.shape[2:]
    if h > H or w > W:
        raise DimensionError(f"cannot crop {H}x{W} to {h}x{w}")
    top, left = (H - h) // 2, (W - w) // 2
    return x[:, :, top:top + h, left:left + w]
