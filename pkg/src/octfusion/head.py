"""Feature fusion by concatenation and the trainable task head.

The head is Linear -> BatchNorm1d -> ReLU -> Dropout -> Linear, held as
float64 numpy arrays with a hand-written backward pass. Tensor names follow
the torch ``state_dict`` convention so checkpoints read naturally.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from safetensors.numpy import load_file, save_file

from .backbones import FEATURE_DIMS, BackboneId, headless_param_count
from .errors import BatchTooSmall, ConfigError, DimensionError

PARAM_NAMES = ("linear.weight", "linear.bias", "bn.weight", "bn.bias", "fc.weight", "fc.bias")
BUFFER_NAMES = ("bn.running_mean", "bn.running_var")


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class CountMode(str, enum.Enum):
    FROZEN = "frozen"
    FROM_SCRATCH = "from_scratch"


@dataclass(frozen=True)
class TaskHeadConfig:
    input_dim: int
    hidden_dim: int = 1024
    num_classes: int = 4
    dropout_p: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.input_dim <= 0 or self.hidden_dim <= 0 or self.num_classes < 2:
            raise ConfigError(f"invalid head dimensions: {self}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @classmethod
    def for_backbones(cls, backbone_ids: Sequence, **overrides) -> "TaskHeadConfig":
        if not backbone_ids:
            raise ConfigError("at least one backbone is required")
        dim = sum(FEATURE_DIMS[BackboneId.parse(b)] for b in backbone_ids)
        return cls(input_dim=dim, **overrides)

    def trainable_params(self) -> int:
        h, c = self.hidden_dim, self.num_classes
        return self.input_dim * h + 3 * h + h * c + c


def relu(x):
    return np.maximum(x, 0.0)


# ----------------------------------------------------------------------- fusion


@dataclass
class FusedFeature:
    vector: np.ndarray
    source_id: str
    order: tuple


def fuse(features: Sequence[np.ndarray], order: Sequence | None = None, source_id: str = "") -> FusedFeature:
    """Concatenate per-backbone vectors in the declared order.

    ``order`` names the backbone for each vector and is used to check widths;
    without it only the nonempty-list precondition is checked.
    """
    if len(features) == 0:
        raise DimensionError("nothing to fuse")
    vectors = [np.asarray(f).reshape(-1) for f in features]
    ids = ()
    if order is not None:
        ids = tuple(BackboneId.parse(b) for b in order)
        if len(ids) != len(vectors):
            raise DimensionError(f"{len(vectors)} vectors for {len(ids)} backbones")
        for bid, v in zip(ids, vectors):
            if v.shape[0] != FEATURE_DIMS[bid]:
                raise DimensionError(f"{bid.value} vector has length {v.shape[0]}, expected {FEATURE_DIMS[bid]}")
    return FusedFeature(np.concatenate(vectors), source_id, tuple(b.value for b in ids))


def fuse_matrix(blocks: Sequence[np.ndarray], order: Sequence | None = None) -> np.ndarray:
    """Row-wise version of :func:`fuse` for (batch x dim) blocks."""
    if len(blocks) == 0:
        raise DimensionError("nothing to fuse")
    blocks = [np.atleast_2d(b) for b in blocks]
    if len({b.shape[0] for b in blocks}) != 1:
        raise DimensionError("blocks disagree on batch size")
    if order is not None:
        for bid, b in zip((BackboneId.parse(o) for o in order), blocks):
            if b.shape[1] != FEATURE_DIMS[bid]:
                raise DimensionError(f"{bid.value} block has width {b.shape[1]}, expected {FEATURE_DIMS[bid]}")
    return np.concatenate(blocks, axis=1)


# ------------------------------------------------------------------------- head


@dataclass
class TaskHead:
    config: TaskHeadConfig
    params: dict = field(repr=False)
    buffers: dict = field(repr=False)
    mode: Mode = Mode.TRAIN

    @classmethod
    def init(cls, config: TaskHeadConfig, seed: int = 0) -> "TaskHead":
        """Fan-in scaled uniform weights, zero biases, BN scale 1 / shift 0."""
        rng = np.random.default_rng(seed)
        d, h, c = config.input_dim, config.hidden_dim, config.num_classes
        b1, b2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
        params = {
            "linear.weight": rng.uniform(-b1, b1, size=(h, d)),
            "linear.bias": np.zeros(h),
            "bn.weight": np.ones(h),
            "bn.bias": np.zeros(h),
            "fc.weight": rng.uniform(-b2, b2, size=(c, h)),
            "fc.bias": np.zeros(c),
        }
        buffers = {"bn.running_mean": np.zeros(h), "bn.running_var": np.ones(h)}
        return cls(config, params, buffers)

    @classmethod
    def zeros(cls, config: TaskHeadConfig) -> "TaskHead":
        head = cls.init(config)
        for v in head.params.values():
            v[...] = 0.0
        return head

    def train(self) -> "TaskHead":
        self.mode = Mode.TRAIN
        return self

    def eval(self) -> "TaskHead":
        self.mode = Mode.EVAL
        return self

    def copy(self) -> "TaskHead":
        return TaskHead(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.mode,
        )

    def num_trainable(self) -> int:
        return sum(v.size for v in self.params.values())

    def state_dict(self) -> dict:
        return {**self.params, **self.buffers}

    def forward(self, x, mode: Mode | None = None, rng=None):
        return head_forward(self, x, mode, rng)


@dataclass
class ForwardCache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    pre_relu: np.ndarray
    mask: np.ndarray | None
    hidden: np.ndarray


def _check_input(head: TaskHead, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.config.input_dim:
        raise DimensionError(f"expected (batch, {head.config.input_dim}) features, got {x.shape}")
    return x


def forward_with_cache(head: TaskHead, x, mode: Mode | None = None, rng=None, update_stats: bool = True):
    """Forward pass returning ``(logits, cache)``; TRAIN mode updates BN running stats."""
    cfg = head.config
    mode = Mode(mode) if mode is not None else head.mode
    x = _check_input(head, x)
    p = head.params
    z = x @ p["linear.weight"].T + p["linear.bias"]
    if mode is Mode.TRAIN:
        n = x.shape[0]
        if n < 2:
            raise BatchTooSmall("BatchNorm needs at least 2 samples in TRAIN mode")
        mean = z.mean(axis=0)
        var = z.var(axis=0)
        if update_stats:
            m = cfg.bn_momentum
            rm, rv = head.buffers["bn.running_mean"], head.buffers["bn.running_var"]
            rm *= 1.0 - m
            rm += m * mean
            rv *= 1.0 - m
            rv += m * var * n / (n - 1)
    else:
        mean = head.buffers["bn.running_mean"]
        var = head.buffers["bn.running_var"]
    inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
    xhat = (z - mean) * inv_std
    pre = xhat * p["bn.weight"] + p["bn.bias"]
    a = relu(pre)
    mask = None
    if mode is Mode.TRAIN and cfg.dropout_p > 0:
        if rng is None:
            raise ConfigError("TRAIN-mode dropout needs a seeded generator")
        keep = 1.0 - cfg.dropout_p
        mask = (rng.random(a.shape) < keep) / keep
        a = a * mask
    logits = a @ p["fc.weight"].T + p["fc.bias"]
    return logits, ForwardCache(x, xhat, inv_std, pre, mask, a)


def head_forward(head: TaskHead, x, mode: Mode | None = None, rng=None) -> np.ndarray:
    return forward_with_cache(head, x, mode, rng)[0]


def head_backward(head: TaskHead, cache: ForwardCache, dlogits: np.ndarray) -> dict:
    """Gradients of a scalar loss wrt every trainable tensor (TRAIN-mode cache)."""
    p = head.params
    grads = {
        "fc.weight": dlogits.T @ cache.hidden,
        "fc.bias": dlogits.sum(axis=0),
    }
    da = dlogits @ p["fc.weight"]
    if cache.mask is not None:
        da = da * cache.mask
    dpre = da * (cache.pre_relu > 0)
    grads["bn.weight"] = (dpre * cache.xhat).sum(axis=0)
    grads["bn.bias"] = dpre.sum(axis=0)
    dxhat = dpre * p["bn.weight"]
    n = dxhat.shape[0]
    dz = (cache.inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0))
    grads["linear.weight"] = dz.T @ cache.x
    grads["linear.bias"] = dz.sum(axis=0)
    return grads


# ------------------------------------------------------------ parameter counts


@dataclass(frozen=True)
class ParamReport:
    trainable: int
    total: int


def count_params(backbones: Sequence, head_config: TaskHeadConfig | None, mode=CountMode.FROZEN) -> ParamReport:
    """Trainable / total parameters of backbones + head.

    ``backbones`` may hold ids or loaded :class:`FrozenBackbone` objects.
    """
    mode = CountMode(mode)
    if not backbones or head_config is None:
        raise ConfigError("a configuration needs at least one backbone and a head")
    ids, counts = [], []
    for b in backbones:
        if hasattr(b, "param_count_headless"):
            ids.append(b.spec.id)
            counts.append(b.param_count_headless)
        else:
            bid = BackboneId.parse(b)
            ids.append(bid)
            counts.append(headless_param_count(bid))
    expected = sum(FEATURE_DIMS[b] for b in ids)
    if head_config.input_dim != expected:
        raise ConfigError(f"head input_dim {head_config.input_dim} != fused width {expected}")
    head = head_config.trainable_params()
    total = sum(counts) + head
    return ParamReport(trainable=head if mode is CountMode.FROZEN else total, total=total)


# ------------------------------------------------------------------ checkpoints


def save_head(head: TaskHead, directory, backbone_order: Sequence = (), seed: int | None = None, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_file({k: np.ascontiguousarray(v) for k, v in head.state_dict().items()}, str(directory / "head.safetensors"))
    sidecar = {
        "config": asdict(head.config),
        "backbone_order": [BackboneId.parse(b).value for b in backbone_order],
        "seed": seed,
    }
    if extra:
        sidecar.update(extra)
    (directory / "head.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return directory


def load_head(directory) -> tuple[TaskHead, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "head.json").read_text())
    config = TaskHeadConfig(**meta["config"])
    tensors = load_file(str(directory / "head.safetensors"))
    missing = [k for k in PARAM_NAMES + BUFFER_NAMES if k not in tensors]
    if missing:
        raise ConfigError(f"head checkpoint lacks {missing}")
    head = TaskHead(
        config,
        {k: tensors[k].astype(np.float64) for k in PARAM_NAMES},
        {k: tensors[k].astype(np.float64) for k in BUFFER_NAMES},
        Mode.EVAL,
    )
    return head, meta
