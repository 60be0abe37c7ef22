"""Figures written next to the CSV/text reports."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_DISPLAY, CLASSES  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figsize(scale=1.0, ratio=None):
    width = 6.0 * scale
    ratio = (math.sqrt(5.0) - 1.0) / 2.0 if ratio is None else ratio
    return width, width * ratio


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history, path, title: str = "") -> Path:
    epochs = [r.epoch for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot(epochs, [r.train_loss for r in history], color="tab:blue", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.val_accuracy for r in history], color="tab:orange", label="val accuracy")
        ax2.set_ylabel("val accuracy")
        ax2.set_ylim(0, 1.02)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="center right", frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_confusion(cm, path, title: str = "") -> Path:
    counts = np.asarray(cm.counts)
    names = [CLASS_DISPLAY.get(c, c) for c in CLASSES[: counts.shape[0]]]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.7, 0.9))
        im = ax.imshow(counts, cmap="Blues")
        ax.set_xticks(range(len(names)), names)
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        thresh = counts.max() / 2.0 if counts.size else 0
        for (i, j), v in np.ndenumerate(counts):
            ax.text(j, i, str(v), ha="center", va="center", color="white" if v > thresh else "black")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_accuracy(reports, path, title: str = "") -> Path:
    """Accuracy per model, one bar group per split/shot label."""
    models = list(dict.fromkeys(r.model for r in reports))
    splits = list(dict.fromkeys(r.split for r in reports))
    acc = {(r.model, r.split): r.accuracy * 100 for r in reports}
    width = 0.8 / max(len(splits), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.2))
        x = np.arange(len(models))
        for i, s in enumerate(splits):
            ax.bar(x + i * width, [acc.get((m, s), 0.0) for m in models], width, label=s or None)
        ax.set_xticks(x + width * (len(splits) - 1) / 2, models, rotation=20, ha="right")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        if len(splits) > 1:
            ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)
