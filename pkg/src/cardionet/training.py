"""Loss, optimizers, early stopping and the epoch loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

from .dataset import DatasetSplit, batches
from .errors import ConfigError, DomainError, EmptyInputError, NumericError

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
EPOCH_LOG_HEADER = ("epoch", "train_accuracy", "val_accuracy", "train_loss")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop: bool = True
    patience: int = 5
    seed: int = 0
    threshold: float = 0.5
    log_initial: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_accuracy: float       # percent
    val_accuracy: float         # percent
    train_loss: Optional[float] = None


# ---------------------------------------------------------------------- loss

def bce_loss(score, target):
    """Binary cross-entropy on a probability. Returns ``(loss, dloss/dscore)``.

    Works elementwise on arrays; the score is clamped to ``[1e-7, 1 - 1e-7]``
    and the gradient is evaluated at the clamped value.
    """
    t = np.asarray(target, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise DomainError(f"BCE target must be 0 or 1, got {target!r}")
    s = np.clip(np.asarray(score, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    loss = -(t * np.log(s) + (1 - t) * np.log(1 - s))
    grad = (s - t) / (s * (1 - s))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, lr=1e-2, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self.velocity = {}

    def step(self, params, grads):
        for name, p in params.items():
            g = grads[name]
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            p -= self.lr * g


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr, config.momentum)
    return Adam(config.lr, config.beta1, config.beta2, config.adam_eps)


def optimizer_step(params, grads, optimizer):
    """Validate gradients and apply one update in place.

    ``params`` and ``grads`` map names to arrays. A NaN/inf gradient aborts
    the whole step before any parameter is touched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"no gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ConfigError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    optimizer.step(params, grads)


# ------------------------------------------------------------ early stopping

class StopDecision(NamedTuple):
    stop: bool
    best_epoch: int


def early_stop_check(history, patience):
    """Stop once the last ``patience`` values fail to beat the running best.

    Only a strict improvement resets the counter; ``best_epoch`` is the index
    of the first occurrence of the best value.
    """
    if not history:
        raise EmptyInputError("early-stop history is empty")
    best = int(np.argmax(np.asarray(history, dtype=np.float64)))
    return StopDecision(len(history) - 1 - best >= patience, best)


# --------------------------------------------------------------------- train

def evaluate_accuracy(model, records, tensors, threshold=0.5, batch_size=32):
    """Percent of records whose eval-mode label matches their class."""
    if not records:
        return float("nan")
    correct = 0
    for x, y, _ in batches(records, tensors, batch_size, shuffle=False):
        pred = model.forward(x, "eval", threshold)
        correct += int(np.sum(pred.label == (y > 0.5)))
    return 100.0 * correct / len(records)


def train(model, data: DatasetSplit, tensors, config: TrainConfig, on_epoch=None):
    """Run the epoch loop; returns ``(model, [EpochLog, ...])``.

    With early stopping on, validation accuracy is monitored and the best
    epoch's parameters are restored when training halts (or ends).
    """
    if not data.train:
        raise ConfigError("training set is empty")
    if not data.val:
        raise ConfigError("validation set is empty")
    optimizer = make_optimizer(config)
    trainable = model.trainable()
    logs, history = [], []
    best_state = None

    def record(epoch, loss):
        tr = evaluate_accuracy(model, data.train, tensors, config.threshold, config.batch_size)
        va = evaluate_accuracy(model, data.val, tensors, config.threshold, config.batch_size)
        entry = EpochLog(epoch, tr, va, loss)
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.info("epoch %d: train %.1f%% val %.1f%% loss %s", epoch, tr, va, loss)
        return entry

    if config.log_initial:
        initial = record(0, None)
        if config.early_stop:
            history.append(initial.val_accuracy)
            best_state = model.state_dict()

    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for b, (x, y, _) in enumerate(batches(data.train, tensors, config.batch_size,
                                              config.seed, epoch)):
            model.zero_grad()
            pred = model.forward(x, "train", config.threshold)
            loss, dscore = bce_loss(pred.score, y)
            batch_loss = float(np.mean(loss))
            if not math.isfinite(batch_loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.backward(dscore / len(y))
            params = {k: t.data for k, t in trainable.items()}
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in trainable.items()}
            try:
                optimizer_step(params, grads, optimizer)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            total += float(np.sum(loss))
            count += len(y)
        entry = record(epoch, total / count)

        if config.early_stop:
            history.append(entry.val_accuracy)
            decision = early_stop_check(history, config.patience)
            if decision.best_epoch == len(history) - 1:
                best_state = model.state_dict()
            if decision.stop:
                log.info("early stop at epoch %d (best epoch %d)", epoch, decision.best_epoch + 1)
                break
    if config.early_stop and best_state is not None:
        model.load_state_dict(best_state)
    return model, logs


# ---------------------------------------------------------------- CSV schema

def _fmt_pct(v):
    return f"{v:.1f}"


def format_epoch_log(logs):
    """CSV text with header ``epoch,train_accuracy,val_accuracy,train_loss``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPOCH_LOG_HEADER)
    for e in logs:
        loss = "" if e.train_loss is None else f"{e.train_loss:.4f}"
        w.writerow([e.epoch, _fmt_pct(e.train_accuracy), _fmt_pct(e.val_accuracy), loss])
    return buf.getvalue()


def parse_epoch_log(text, source="<epoch log>"):
    from .errors import RowError, SchemaError

    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header[:3]) != EPOCH_LOG_HEADER[:3]:
        raise SchemaError(f"{source}: expected header {','.join(EPOCH_LOG_HEADER)}; found {header}")
    logs = []
    for row in reader:
        if not row:
            continue
        try:
            loss = float(row[3]) if len(row) > 3 and row[3].strip() else None
            logs.append(EpochLog(int(row[0]), float(row[1]), float(row[2]), loss))
        except (ValueError, IndexError) as exc:
            raise RowError(str(exc), reader.line_num, source) from None
    return logs
