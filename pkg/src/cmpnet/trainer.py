"""SGD training loop: momentum, weight decay, cosine-annealed learning rate.

Convolutional ("conv" group) parameters train at ``conv_lr_ratio`` times
the learning rate of the classifier ("fc" group).
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import DivergenceError, ShapeError
from .ops import softmax_cross_entropy
from .tensor import Rng

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "train_loss", "train_acc", "test_acc", "lr")


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr_fc: float = 0.1
    conv_lr_ratio: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_min: float = 0.0
    seed: int = 1
    augment: bool = True
    pad: int = 4

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 <= self.lr_min <= self.lr_fc:
            raise ValueError(f"need 0 <= lr_min <= lr_fc, got {self.lr_min}, {self.lr_fc}")
        if not self.lr_fc >= 0:
            raise ValueError(f"lr_fc must be non-negative, got {self.lr_fc}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr_fc_effective: float


def cosine_lr(t: int, T: int, lr_max: float, lr_min: float = 0.0) -> float:
    if T < 1 or not 0 <= t <= T:
        raise ValueError(f"cosine_lr needs 0 <= t <= T and T >= 1, got t={t}, T={T}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


def sgd_step(state: M.ModelState, cfg: TrainConfig, epoch: int) -> float:
    """One SGD update in place; returns the fc-group learning rate used."""
    lr = cosine_lr(epoch, cfg.epochs, cfg.lr_fc, cfg.lr_min)
    for name, p in state.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {name} at epoch {epoch}")
        g = p.grad + cfg.weight_decay * p.value if cfg.weight_decay else p.grad
        v = state.velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        state.velocity[name] = v
        step = lr * cfg.conv_lr_ratio if p.group == "conv" else lr
        p.value -= step * v
    return lr


def augment_batch(images, rng: Rng, mean, pad: int = 4, augment: bool = True):
    """Zero-pad, random crop back to size, random horizontal flip, subtract mean.

    With ``augment=False`` only the mean is subtracted.
    """
    if images.shape[1:] != mean.shape:
        raise ShapeError(f"mean image {mean.shape} does not match images {images.shape[1:]}")
    if not augment:
        return images - mean
    B, _, H, W = images.shape
    # draw everything up front so the stream order is fixed
    offsets = rng.integers(0, 2 * pad + 1, size=(B, 2))
    flips = rng.random((B,)) < 0.5
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(B):
        oy, ox = offsets[i]
        crop = padded[i, :, oy : oy + H, ox : ox + W]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out - mean


def evaluate(state: M.ModelState, images, labels, mean, batch_size: int = 128) -> float:
    if len(images) == 0:
        return 0.0
    pred = M.predict(state, images - mean, batch_size)
    return float((pred == labels).mean())


@dataclass
class TrainResult:
    state: M.ModelState  # after the last epoch
    best: M.ModelState  # highest test accuracy (earliest epoch on ties)
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0


def train(state: M.ModelState, data, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of mini-batch SGD on ``data`` (a :class:`~cmpnet.data.Dataset`)."""
    n = len(data.x_train)
    if n == 0:
        raise ValueError("empty training set")
    if data.x_train.shape[1:] != tuple(state.spec.input_shape):
        raise ShapeError(f"dataset images {data.x_train.shape[1:]} vs model input {state.spec.input_shape}")
    rng = Rng([cfg.seed, 0xDA7A])
    rows, best, best_acc, best_epoch, steps = [], None, -1.0, 0, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_fc, cfg.lr_min)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = augment_batch(data.x_train[idx], rng, data.mean, cfg.pad, cfg.augment)
            y = data.y_train[idx]
            logits, caches = M.forward(state, x, "train")
            loss, grad = softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}", checkpoint=best)
            M.backward(state, caches, grad)
            try:
                sgd_step(state, cfg, epoch)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), checkpoint=best) from None
            steps += 1
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        test_acc = evaluate(state, data.x_test, data.y_test, data.mean)
        row = MetricsRow(epoch + 1, total_loss / n, correct / n, test_acc, lr)
        rows.append(row)
        log.info(
            "epoch %d loss %.4f train_acc %.4f test_acc %.4f lr %.5f",
            row.epoch, row.train_loss, row.train_acc, row.test_acc, lr,
        )
        if test_acc > best_acc:
            best_acc, best_epoch, best = test_acc, row.epoch, M.copy_state(state)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(state, best, rows, best_epoch, steps)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(
            [r.epoch, repr(float(r.train_loss)), repr(float(r.train_acc)), repr(float(r.test_acc)), repr(float(r.lr_fc_effective))]
        )
    return buf.getvalue()


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(rows))
