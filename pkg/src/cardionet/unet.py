"""U-Net classifier with a localization map.

Encoder: ``depth`` blocks of ``convs_per_block`` x (conv -> BN -> ReLU), each
followed by 2x2 max pooling, widths ``base_width * 2**i``. Decoder: per level
a stride-2 transposed convolution, concatenation with the encoder features
of the same level, and another conv block. A 1x1 convolution plus sigmoid
gives a one-channel map; the head turns the map into a per-image score.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import kernels as K
from .errors import ConfigError, DimensionError, StateError
from .layers import ConvBlock, ConvTranspose2d, Conv2d, Dense, MaxPool2d
from .tensor import ConvSpec

HEADS = ("mean", "max", "dense")


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_width: int = 64
    convs_per_block: int = 3
    kernel: int = 3
    pool: int = 2
    input_size: int = 256
    in_channels: int = 1
    head: str = "mean"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_width < 1 or self.convs_per_block < 1:
            raise ConfigError("base_width and convs_per_block must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd for same padding, got {self.kernel}")
        if self.pool != 2:
            raise ConfigError("pooling window/stride is fixed at 2")
        if self.input_size < 1 or self.input_size % (2 ** self.depth):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}")
        if self.in_channels != 1:
            raise ConfigError("only single-channel (grayscale) input is supported")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")

    @property
    def widths(self):
        return tuple(self.base_width * 2 ** i for i in range(self.depth))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown UNetConfig keys: {sorted(unknown)}")
        return cls(**d)


class Prediction(NamedTuple):
    map: np.ndarray     # (N, 1, S, S), values in (0, 1)
    score: np.ndarray   # (N,)
    label: np.ndarray   # (N,) bool, positive = Cardiomegaly


def classify(score, threshold=0.5):
    """Positive iff ``score >= threshold``; a tie counts as positive."""
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(score) >= threshold


class Model:
    """Materialized U-Net. ``params`` maps stable names to :class:`Tensor`s."""

    def __init__(self, config: UNetConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.encoder = []
        in_ch = c.in_channels
        for i, w in enumerate(c.widths):
            self.encoder.append(ConvBlock(in_ch, w, c.convs_per_block, c.kernel, rng,
                                          c.bn_eps, c.bn_momentum, f"enc{i}"))
            in_ch = w
        self.pools = [MaxPool2d() for _ in c.widths]
        self.ups, self.decoder = [], []
        for i in reversed(range(c.depth)):
            w = c.widths[i]
            src = c.widths[i + 1] if i + 1 < c.depth else c.widths[-1]
            self.ups.append(ConvTranspose2d(ConvSpec(src, w, 2, 2, 2, 0), rng, f"dec{i}.up"))
            self.decoder.append(ConvBlock(2 * w, w, c.convs_per_block, c.kernel, rng,
                                          c.bn_eps, c.bn_momentum, f"dec{i}"))
        self.out_conv = Conv2d(ConvSpec(c.widths[0], 1, 1, 1), rng, "out")
        self.dense = Dense(c.widths[-1], 1, rng, "head.dense") if c.head == "dense" else None
        self.params = self._collect()
        self._trace = None

    def _collect(self):
        named = OrderedDict()
        for blk in self.encoder:
            for k, t in blk.params():
                named[f"{blk.name}.{k}"] = t
        for up, blk in zip(self.ups, self.decoder):
            for k, t in up.params():
                named[f"{up.name}.{k}"] = t
            for k, t in blk.params():
                named[f"{blk.name}.{k}"] = t
        for k, t in self.out_conv.params():
            named[f"out.{k}"] = t
        if self.dense is not None:
            for k, t in self.dense.params():
                named[f"head.dense.{k}"] = t
        return named

    # ------------------------------------------------------------------ info

    def trainable(self):
        return OrderedDict((k, t) for k, t in self.params.items() if t.requires_grad)

    def parameter_count(self, trainable_only=True):
        src = self.trainable() if trainable_only else self.params
        return sum(t.size for t in src.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def astype(self, dtype):
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state_dict(self):
        return OrderedDict((k, t.data.copy()) for k, t in self.params.items())

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise DimensionError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    # --------------------------------------------------------------- forward

    def forward(self, x, mode="eval", threshold=0.5):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2:] != (s, s):
            raise DimensionError(f"expected batch of shape (N, 1, {s}, {s}), got {x.shape}")
        record = mode == "train"
        x = np.asarray(x, dtype=self.dtype)
        skips = []
        h = x
        for blk, pool in zip(self.encoder, self.pools):
            h = blk.forward(h, mode, record)
            skips.append(h)
            h = pool.forward(h, record)
        bottom = h
        crops = []
        for up, blk, skip in zip(self.ups, self.decoder, reversed(skips)):
            h = up.forward(h, record)
            if skip.shape[2:] != h.shape[2:]:
                crops.append(skip.shape)
                skip = K.center_crop_tensor(skip, *h.shape[2:])
            else:
                crops.append(None)
            h = K.concat_channels(h, skip)
            h = blk.forward(h, mode, record)
        logits = self.out_conv.forward(h, record)
        prob = K.sigmoid(logits)
        if self.config.head == "mean":
            score = prob.mean(axis=(1, 2, 3))
        elif self.config.head == "max":
            score = prob.reshape(len(prob), -1).max(axis=1)
        else:
            pooled = bottom.mean(axis=(2, 3))
            score = K.sigmoid(self.dense.forward(pooled, record))[:, 0]
        if record:
            self._trace = dict(prob=prob, score=score, skips=[s.shape for s in skips],
                               crops=crops, bottom_shape=bottom.shape)
        return Prediction(prob, score, classify(score, threshold))

    # -------------------------------------------------------------- backward

    def backward(self, dscore):
        """Accumulate parameter gradients given dLoss/dscore of shape (N,)."""
        if self._trace is None:
            raise StateError("backward called before a train-mode forward")
        tr, self._trace = self._trace, None
        prob, score = tr["prob"], tr["score"]
        dscore = np.asarray(dscore, dtype=self.dtype).reshape(-1)
        n = prob.shape[0]
        head = self.config.head
        dbottom = np.zeros(tr["bottom_shape"], dtype=self.dtype)
        dskips = None
        if head == "dense":
            dlogit = (dscore * score * (1 - score))[:, None]
            dpooled = self.dense.backward(dlogit)
            hw = dbottom.shape[2] * dbottom.shape[3]
            dbottom += dpooled[:, :, None, None] / hw
            # decoder caches are stale; the map is not on the loss path
            self._drop_decoder_caches()
        else:
            if head == "mean":
                hw = prob.shape[2] * prob.shape[3]
                dprob = np.broadcast_to((dscore / hw)[:, None, None, None], prob.shape).copy()
            else:
                flat = prob.reshape(n, -1)
                dprob = np.zeros_like(flat)
                dprob[np.arange(n), flat.argmax(axis=1)] = dscore
                dprob = dprob.reshape(prob.shape)
            dh = self.out_conv.backward(K.sigmoid_backward(dprob, prob))
            dskips = [None] * len(tr["skips"])
            for lvl, (up, blk, crop) in enumerate(zip(reversed(self.ups), reversed(self.decoder),
                                                     reversed(tr["crops"]))):
                dh = blk.backward(dh)
                ca = up.spec.out_channels
                dh, dskip = K.concat_channels_backward(dh, ca)
                if crop is not None:
                    dskip = _uncrop(dskip, crop)
                dskips[lvl] = dskip
                dh = up.backward(dh)
            dbottom += dh
        dh = dbottom
        for lvl in reversed(range(len(self.encoder))):
            dh = self.pools[lvl].backward(dh)
            if dskips is not None:
                dh = dh + dskips[lvl]
            dh = self.encoder[lvl].backward(dh)
        return dh

    def _drop_decoder_caches(self):
        for layer in [self.out_conv, *self.ups]:
            layer._cache = None
        for blk in self.decoder:
            for conv, bn, act in blk.stages:
                conv._cache = bn._cache = act._cache = None


def _uncrop(d, full_shape):
    out = np.zeros(full_shape, dtype=d.dtype)
    h, w = d.shape[2:]
    top, left = (full_shape[2] - h) // 2, (full_shape[3] - w) // 2
    out[:, :, top:top + h, left:left + w] = d
    return out


def build_unet(config: UNetConfig, seed=0) -> Model:
    return Model(config, seed)


def forward(model: Model, batch, mode="eval", threshold=0.5) -> Prediction:
    return model.forward(batch, mode, threshold)
