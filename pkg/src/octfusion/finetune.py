"""Whole-network training for the fine-tune and from-scratch baselines.

Backbones stay trainable here. A single backbone gets a plain linear 4-class
classifier in place of its ImageNet head; several backbones share the same
Linear-BN-ReLU-Dropout-FC task head as the frozen ensemble. Updates use the
numpy Adam from :mod:`octfusion.optim` on shared-memory views of the torch
parameters.
"""
from __future__ import annotations

import copy
import enum
import math

import numpy as np
import torch
from torch import nn

from .backbones import (
    FEATURE_DIMS,
    BackboneId,
    build_architecture,
    canonical_order,
    get_spec,
    load_state_into,
    preprocess,
    read_archive,
)
from .head import TaskHead, TaskHeadConfig
from .optim import AdamState, adam_step
from .trainer import EpochRecord, Selection, TrainConfig, minibatches


class Baseline(str, enum.Enum):
    FINETUNE_ALL = "finetune_all"
    FROM_SCRATCH = "from_scratch"


class FusionNet(nn.Module):
    def __init__(self, backbones, head: nn.Module):
        super().__init__()
        self.backbones = nn.ModuleList(backbones)
        self.head = head

    def forward(self, x):
        feats = [b(x).flatten(1) for b in self.backbones]
        return self.head(torch.cat(feats, dim=1))


def torch_task_head(config: TaskHeadConfig, seed: int) -> nn.Module:
    """Torch mirror of :class:`TaskHead`, initialised from the same seeded draw."""
    ref = TaskHead.init(config, seed)
    head = nn.Sequential(
        nn.Linear(config.input_dim, config.hidden_dim),
        nn.BatchNorm1d(config.hidden_dim, eps=config.bn_eps, momentum=config.bn_momentum),
        nn.ReLU(),
        nn.Dropout(config.dropout_p),
        nn.Linear(config.hidden_dim, config.num_classes),
    )
    with torch.no_grad():
        head[0].weight.copy_(torch.from_numpy(ref.params["linear.weight"]))
        head[0].bias.zero_()
        head[4].weight.copy_(torch.from_numpy(ref.params["fc.weight"]))
        head[4].bias.zero_()
    return head


def build_full_model(backbone_ids, baseline, head_config: TaskHeadConfig | None = None, seed: int = 0,
                     weights_dir=None, num_classes: int = 4) -> FusionNet:
    baseline = Baseline(baseline)
    ids = canonical_order(backbone_ids)
    nets = []
    with torch.random.fork_rng():
        for i, bid in enumerate(ids):
            net = build_architecture(bid, init_seed=seed * 31 + i)
            if baseline is Baseline.FINETUNE_ALL:
                load_state_into(net, read_archive(get_spec(bid, weights_dir).weight_source))
            nets.append(net)
        width = sum(FEATURE_DIMS[b] for b in ids)
        if len(ids) == 1:
            torch.manual_seed(seed)
            head = nn.Linear(width, num_classes)
        else:
            head = torch_task_head(head_config or TaskHeadConfig(width, num_classes=num_classes), seed)
    model = FusionNet(nets, head).float()
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def trainable_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


class ImageBatches:
    """Lazily preprocessed images; ``paths`` may be files or decoded arrays."""

    def __init__(self, paths, spec=None):
        self.paths = list(paths)
        self.spec = spec or get_spec(BackboneId.RESNET18)

    def __len__(self):
        return len(self.paths)

    def get(self, idx) -> torch.Tensor:
        arrs = [preprocess(self.paths[i], self.spec).pixels for i in idx]
        return torch.from_numpy(np.stack(arrs))


def predict_full(model: FusionNet, images: ImageBatches, batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = []
    with torch.inference_mode():
        for start in range(0, len(images), batch_size):
            idx = range(start, min(start + batch_size, len(images)))
            out.append(model(images.get(idx)).argmax(dim=1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_full_model(model: FusionNet, train_images: ImageBatches, train_labels, val_images: ImageBatches,
                     val_labels, cfg: TrainConfig):
    """Returns ``(model with selected weights, selected_epoch, history)``."""
    y = torch.as_tensor(np.asarray(train_labels, dtype=np.int64))
    yv = np.asarray(val_labels, dtype=np.int64)
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    torch.manual_seed(cfg.seed)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    views = {n: p.data.numpy() for n, p in named}
    state = AdamState.for_params(views)
    loss_fn = nn.CrossEntropyLoss()
    selection = cfg.selection if len(yv) else Selection.FINAL_EPOCH
    best_state, best_acc, best_epoch = None, -math.inf, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total = 0.0
        for idx in minibatches(len(train_images), cfg.batch_size, shuffle_rng):
            model.zero_grad(set_to_none=False)
            loss = loss_fn(model(train_images.get(idx)), y[idx])
            loss.backward()
            grads = {n: p.grad.numpy() for n, p in named}
            adam_step(state, grads, cfg.adam, views)
            total += loss.detach().item() * len(idx)
        val_acc = float(np.mean(predict_full(model, val_images) == yv)) if len(yv) else float("nan")
        history.append(EpochRecord(epoch, total / len(train_images), val_acc))
        if selection is Selection.BEST_VAL_ACC and val_acc > best_acc:
            best_state, best_acc, best_epoch = copy.deepcopy(model.state_dict()), val_acc, epoch
    if selection is Selection.BEST_VAL_ACC:
        model.load_state_dict(best_state)
    else:
        best_epoch = cfg.epochs
    model.eval()
    return model, best_epoch, history
