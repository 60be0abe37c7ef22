"""Cross-entropy loss and the mini-batch training loop for the task head."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BatchTooSmall, ConfigError, DimensionError, InvalidDistribution
from .head import Mode, TaskHead, forward_with_cache, head_backward, head_forward
from .optim import AdamHyperparams, AdamState, adam_step

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6


class Selection(str, enum.Enum):
    BEST_VAL_ACC = "best"
    FINAL_EPOCH = "final"

    @classmethod
    def parse(cls, value) -> "Selection":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        for member in cls:
            if v in (member.value, member.name.lower()):
                return member
        raise ConfigError(f"unknown selection {value!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    adam: AdamHyperparams = field(default_factory=AdamHyperparams)
    selection: Selection = Selection.BEST_VAL_ACC

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (BatchNorm)")
        object.__setattr__(self, "selection", Selection.parse(self.selection))


# ------------------------------------------------------------------------- loss


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p, q, num_classes: int | None = None) -> float:
    """-sum(q * ln p) for one-hot ``q``; 2-D inputs give the mean over rows."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise InvalidDistribution(f"p shape {p.shape} != q shape {q.shape}")
    if num_classes is not None and p.shape[1] != num_classes:
        raise InvalidDistribution(f"expected {num_classes} classes, got {p.shape[1]}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise InvalidDistribution("p is not a probability distribution")
    if not (np.all((q == 0) | (q == 1)) and np.all(q.sum(axis=1) == 1)):
        raise InvalidDistribution("q must be one-hot")
    p = np.maximum(p, PROB_FLOOR)
    return float(np.mean(-(q * np.log(p)).sum(axis=1)))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def softmax_cross_entropy(logits, labels):
    """Mean loss over the batch and its gradient wrt the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    p = softmax(logits)
    q = one_hot(labels, c)
    loss = float(np.mean(-np.log(np.maximum(p[np.arange(n), labels], PROB_FLOOR))))
    return loss, (p - q) / n


# ------------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainedHead:
    head: TaskHead
    selected_epoch: int
    selection: Selection
    history: list


def minibatches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is merged into its predecessor."""
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def predict(head: TaskHead, features) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    logits = head_forward(head, features, Mode.EVAL)
    return np.argmax(logits, axis=1)


def accuracy_of(head: TaskHead, features, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(head, features) == np.asarray(labels)))


def _check_data(head: TaskHead, x, y, what: str):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != head.config.input_dim:
        raise DimensionError(f"{what} features have shape {x.shape}, head expects width {head.config.input_dim}")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"{what}: {x.shape[0]} feature rows but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= head.config.num_classes):
        raise DimensionError(f"{what} labels outside [0, {head.config.num_classes})")
    return x, y


def train_head(head: TaskHead, train_features, train_labels, val_features, val_labels, cfg: TrainConfig,
               callback=None) -> TrainedHead:
    """Mini-batch Adam on the head parameters only.

    Shuffling and dropout draw from generators seeded by ``cfg.seed``. With
    BEST_VAL_ACC the earliest epoch reaching the highest validation accuracy
    is returned; without validation data selection falls back to the final epoch.
    """
    x, y = _check_data(head, train_features, train_labels, "train")
    xv, yv = _check_data(head, val_features, val_labels, "val")
    if x.shape[0] < 2:
        raise BatchTooSmall("need at least 2 training samples")

    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState.for_params(head.params)
    selection = cfg.selection if len(yv) else Selection.FINAL_EPOCH
    best, best_acc, best_epoch = None, -math.inf, 0
    history = []

    for epoch in range(1, cfg.epochs + 1):
        head.train()
        total = 0.0
        for idx in minibatches(x.shape[0], cfg.batch_size, shuffle_rng):
            logits, cache = forward_with_cache(head, x[idx], Mode.TRAIN, dropout_rng)
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            grads = head_backward(head, cache, dlogits)
            adam_step(state, grads, cfg.adam, head.params)
            total += loss * len(idx)
        head.eval()
        val_acc = accuracy_of(head, xv, yv)
        rec = EpochRecord(epoch, total / x.shape[0], val_acc)
        history.append(rec)
        if callback is not None:
            callback(rec)
        if selection is Selection.BEST_VAL_ACC and val_acc > best_acc:
            best, best_acc, best_epoch = head.copy(), val_acc, epoch

    if selection is Selection.FINAL_EPOCH:
        best, best_epoch = head.copy(), cfg.epochs
    best.eval()
    return TrainedHead(best, best_epoch, selection, history)


def write_history(history, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_accuracy"])
        for rec in history:
            w.writerow([rec.epoch, repr(float(rec.train_loss)), repr(float(rec.val_accuracy))])
    return path


def read_history(path) -> list[EpochRecord]:
    with Path(path).open() as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_accuracy"]))
                for r in csv.DictReader(fh)]
