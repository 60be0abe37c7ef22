"""Headless, frozen ImageNet backbones used as fixed feature extractors.

Weights live in ``<weights_dir>/<backbone_id>.weights``, a safetensors
archive (JSON header of name -> dtype/shape/offsets, then raw bytes) holding
the headless state dict. The classifier head and the Inception V3 auxiliary
branch are never part of the architecture built here.
"""
from __future__ import annotations

import enum
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file
from torch import nn
from torchvision import models

from .errors import (
    ConfigError,
    DecodeError,
    DimensionError,
    EmptyImage,
    MissingTensor,
    ShapeMismatch,
    WeightsError,
)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INPUT_SIZE = 224
NUM_IMAGENET_CLASSES = 1000
WEIGHTS_SUFFIX = ".weights"


class BackboneId(str, enum.Enum):
    RESNET18 = "resnet18"
    DENSENET121 = "densenet121"
    INCEPTIONV3 = "inceptionv3"

    @classmethod
    def parse(cls, value) -> "BackboneId":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "").replace(" ", "")
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        raise ConfigError(f"unknown backbone {value!r}; expected one of {[m.value for m in cls]}")


# Canonical fusion order.
BACKBONE_ORDER = (BackboneId.RESNET18, BackboneId.DENSENET121, BackboneId.INCEPTIONV3)

FEATURE_DIMS = {
    BackboneId.RESNET18: 512,
    BackboneId.DENSENET121: 1024,
    BackboneId.INCEPTIONV3: 2048,
}

DISPLAY_NAMES = {
    BackboneId.RESNET18: "ResNet18",
    BackboneId.DENSENET121: "DenseNet121",
    BackboneId.INCEPTIONV3: "Inception V3",
}


def canonical_order(ids: Iterable) -> list[BackboneId]:
    wanted = {BackboneId.parse(i) for i in ids}
    return [b for b in BACKBONE_ORDER if b in wanted]


def resolve_weights_dir(weights_dir=None) -> Path:
    if weights_dir is None:
        weights_dir = os.environ.get("FF_WEIGHTS_DIR")
    if weights_dir is None:
        raise ConfigError("no weights directory: set FF_WEIGHTS_DIR or the weights_dir config key")
    return Path(weights_dir)


@dataclass(frozen=True)
class BackboneSpec:
    id: BackboneId
    feature_dim: int
    weight_source: Path | None = None
    input_size: int = INPUT_SIZE
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    @property
    def preprocess_config(self) -> dict:
        return {
            "input_size": self.input_size,
            "mean": list(self.mean),
            "std": list(self.std),
            "interpolation": "bilinear",
            "channels": "gray-replicated",
        }

    @property
    def preprocess_digest(self) -> str:
        blob = json.dumps(self.preprocess_config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def get_spec(backbone_id, weights_dir=None) -> BackboneSpec:
    bid = BackboneId.parse(backbone_id)
    source = None
    if weights_dir is not None or os.environ.get("FF_WEIGHTS_DIR"):
        source = resolve_weights_dir(weights_dir) / f"{bid.value}{WEIGHTS_SUFFIX}"
    return BackboneSpec(id=bid, feature_dim=FEATURE_DIMS[bid], weight_source=source)


def build_architecture(backbone_id, init_seed: int | None = None) -> nn.Module:
    """Return the headless architecture; its forward yields pooled features."""
    bid = BackboneId.parse(backbone_id)
    if init_seed is not None:
        torch.manual_seed(init_seed)
    if bid is BackboneId.RESNET18:
        net = models.resnet18(weights=None)
        net.fc = nn.Identity()
    elif bid is BackboneId.DENSENET121:
        net = models.densenet121(weights=None)
        net.classifier = nn.Identity()
    else:
        # transform_input matches the torchvision ImageNet checkpoint convention
        net = models.inception_v3(weights=None, aux_logits=False, init_weights=True, transform_input=True)
        net.fc = nn.Identity()
        net.dropout = nn.Identity()
    return net


def published_head_params(backbone_id, num_classes: int = NUM_IMAGENET_CLASSES) -> int:
    dim = FEATURE_DIMS[BackboneId.parse(backbone_id)]
    return dim * num_classes + num_classes


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def state_digest(module: nn.Module) -> str:
    """SHA-256 over every named parameter and buffer, in sorted name order."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _required_keys(module: nn.Module) -> dict:
    return {k: tuple(v.shape) for k, v in module.state_dict().items() if not k.endswith("num_batches_tracked")}


def read_archive(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise WeightsError(f"weight archive not found: {path}")
    try:
        return load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise WeightsError(f"unreadable weight archive {path}: {exc}") from exc


def load_state_into(module: nn.Module, tensors: dict, source="archive") -> None:
    required = _required_keys(module)
    missing = sorted(k for k in required if k not in tensors)
    if missing:
        raise MissingTensor(f"{source} lacks {len(missing)} tensor(s), first: {missing[0]}")
    for name, shape in required.items():
        got = tuple(tensors[name].shape)
        if got != shape:
            raise ShapeMismatch(f"{source}: {name} has shape {got}, architecture expects {shape}")
    state = {k: v for k, v in tensors.items() if k in module.state_dict()}
    module.load_state_dict(state, strict=False)


def _calibrate_batchnorm(net: nn.Module, seed: int, n: int = 8) -> None:
    # Random init leaves running stats at 0/1, which makes eval-mode activations
    # explode through deep stacks; one noise batch sets them to batch statistics.
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, INPUT_SIZE, INPUT_SIZE, generator=g)
    bns = [m for m in net.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    net.train()
    with torch.no_grad():
        net(x)
    for m in bns:
        m.momentum = 0.1
    net.eval()


def export_weights(backbone_id, path, source: str = "random", seed: int = 0) -> Path:
    """Write a headless weight archive.

    ``source="random"`` gives a seeded random initialisation (test fixtures);
    ``source="torchvision"`` converts the torchvision ImageNet checkpoint,
    which needs network access or a populated torch hub cache.
    """
    bid = BackboneId.parse(backbone_id)
    if source == "random":
        with torch.random.fork_rng():
            net = build_architecture(bid, init_seed=seed)
        _calibrate_batchnorm(net, seed)
    elif source == "torchvision":
        ctor, weights = {
            BackboneId.RESNET18: (models.resnet18, models.ResNet18_Weights.IMAGENET1K_V1),
            BackboneId.DENSENET121: (models.densenet121, models.DenseNet121_Weights.IMAGENET1K_V1),
            BackboneId.INCEPTIONV3: (models.inception_v3, models.Inception_V3_Weights.IMAGENET1K_V1),
        }[bid]
        full = ctor(weights=weights)
        net = build_architecture(bid)
        load_state_into(net, full.state_dict(), source="torchvision checkpoint")
    else:
        raise ConfigError(f"unknown weight source {source!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().contiguous() for k, v in net.state_dict().items()}
    save_file(state, str(path), metadata={"backbone": bid.value, "source": source, "seed": str(seed)})
    return path


@dataclass
class FrozenBackbone:
    spec: BackboneSpec
    module: nn.Module = field(repr=False)
    param_count_headless: int
    weights_digest: str

    @property
    def id(self) -> BackboneId:
        return self.spec.id

    def current_digest(self) -> str:
        return state_digest(self.module)

    def extract(self, batch) -> np.ndarray:
        return extract(self, batch)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def load_frozen_backbone(spec: BackboneSpec) -> FrozenBackbone:
    if spec.weight_source is None:
        raise ConfigError(f"{spec.id.value}: no weight source configured")
    tensors = read_archive(spec.weight_source)
    net = build_architecture(spec.id)
    load_state_into(net, tensors, source=str(spec.weight_source))
    freeze(net)
    return FrozenBackbone(
        spec=spec,
        module=net,
        param_count_headless=count_parameters(net),
        weights_digest=state_digest(net),
    )


def load_backbones(ids: Sequence, weights_dir=None) -> list[FrozenBackbone]:
    return [load_frozen_backbone(get_spec(b, weights_dir)) for b in canonical_order(ids)]


# ---------------------------------------------------------------- preprocessing


@dataclass
class PreprocessedImage:
    pixels: np.ndarray  # float32, 3 x H x W, normalized
    source_id: str


def decode_image(raw) -> np.ndarray:
    """Decode to a float array in [0, 1], shape HxW (gray) or HxWx3 (RGB)."""
    if isinstance(raw, np.ndarray):
        arr = raw
    else:
        try:
            if isinstance(raw, (bytes, bytearray)):
                img = Image.open(io.BytesIO(raw))
            elif isinstance(raw, Image.Image):
                img = raw
            else:
                img = Image.open(raw)
            img.load()
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise DecodeError(f"cannot decode image {raw if isinstance(raw, (str, Path)) else ''}: {exc}") from exc
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB") if img.mode in ("RGBA", "P", "CMYK") else img.convert("L")
        arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise DecodeError(f"unsupported image array shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise EmptyImage("image has a zero dimension")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float32) / 255.0
    return arr.astype(np.float32, copy=False)


def preprocess(raw_image, spec: BackboneSpec, source_id: str = "") -> PreprocessedImage:
    arr = decode_image(raw_image)
    if arr.ndim == 2:
        chw = np.broadcast_to(arr, (3,) + arr.shape)
    else:
        chw = arr.transpose(2, 0, 1)
    t = torch.from_numpy(np.ascontiguousarray(chw))[None]
    size = spec.input_size
    if t.shape[-2:] != (size, size):
        t = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    mean = torch.tensor(spec.mean, dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.tensor(spec.std, dtype=torch.float32).view(1, 3, 1, 1)
    t = (t - mean) / std
    return PreprocessedImage(pixels=t[0].numpy().copy(), source_id=source_id)


def _stack(batch, size: int) -> torch.Tensor:
    if len(batch) == 0:
        raise DimensionError("empty batch")
    arrays = []
    for item in batch:
        px = item.pixels if isinstance(item, PreprocessedImage) else np.asarray(item)
        if px.shape != (3, size, size):
            raise DimensionError(f"expected input of shape (3, {size}, {size}), got {px.shape}")
        arrays.append(px)
    return torch.from_numpy(np.stack(arrays).astype(np.float32, copy=False))


def extract(backbone: FrozenBackbone, batch) -> np.ndarray:
    """Pooled penultimate features, one float32 row per input, input order kept."""
    x = _stack(batch, backbone.spec.input_size)
    backbone.module.eval()
    with torch.inference_mode():
        out = backbone.module(x)
    out = out.reshape(out.shape[0], -1)
    if out.shape[1] != backbone.spec.feature_dim:
        raise DimensionError(f"{backbone.id.value} produced width {out.shape[1]}, expected {backbone.spec.feature_dim}")
    return out.numpy().astype(np.float32, copy=True)


# ------------------------------------------------------- shape-arithmetic counts
# Parameter totals from layer shapes alone, so audits need no model instantiation.


def _conv(cin, cout, kh, kw=None, bias=False):
    kw = kh if kw is None else kw
    return cin * cout * kh * kw + (cout if bias else 0)


def _bn(c):
    return 2 * c


def _resnet18_count() -> int:
    total = _conv(3, 64, 7) + _bn(64)
    cin = 64
    for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        for block in range(2):
            s = stride if block == 0 else 1
            total += _conv(cin, cout, 3) + _bn(cout) + _conv(cout, cout, 3) + _bn(cout)
            if s != 1 or cin != cout:
                total += _conv(cin, cout, 1) + _bn(cout)
            cin = cout
    return total


def _densenet121_count(growth=32, bn_size=4, blocks=(6, 12, 24, 16)) -> int:
    total = _conv(3, 64, 7) + _bn(64)
    c = 64
    for i, n_layers in enumerate(blocks):
        for _ in range(n_layers):
            total += _bn(c) + _conv(c, bn_size * growth, 1) + _bn(bn_size * growth) + _conv(bn_size * growth, growth, 3)
            c += growth
        if i != len(blocks) - 1:
            total += _bn(c) + _conv(c, c // 2, 1)
            c //= 2
    return total + _bn(c)


def _basic(cin, cout, kh, kw=None):
    return _conv(cin, cout, kh, kw) + _bn(cout)


def _inception_a(cin, pool):
    return (_basic(cin, 64, 1) + _basic(cin, 48, 1) + _basic(48, 64, 5) + _basic(cin, 64, 1)
            + _basic(64, 96, 3) + _basic(96, 96, 3) + _basic(cin, pool, 1))


def _inception_b(cin):
    return _basic(cin, 384, 3) + _basic(cin, 64, 1) + _basic(64, 96, 3) + _basic(96, 96, 3)


def _inception_c(cin, c7):
    return (_basic(cin, 192, 1)
            + _basic(cin, c7, 1) + _basic(c7, c7, 1, 7) + _basic(c7, 192, 7, 1)
            + _basic(cin, c7, 1) + _basic(c7, c7, 7, 1) + _basic(c7, c7, 1, 7) + _basic(c7, c7, 7, 1)
            + _basic(c7, 192, 1, 7) + _basic(cin, 192, 1))


def _inception_d(cin):
    return (_basic(cin, 192, 1) + _basic(192, 320, 3) + _basic(cin, 192, 1) + _basic(192, 192, 1, 7)
            + _basic(192, 192, 7, 1) + _basic(192, 192, 3))


def _inception_e(cin):
    return (_basic(cin, 320, 1) + _basic(cin, 384, 1) + _basic(384, 384, 1, 3) + _basic(384, 384, 3, 1)
            + _basic(cin, 448, 1) + _basic(448, 384, 3) + _basic(384, 384, 1, 3) + _basic(384, 384, 3, 1)
            + _basic(cin, 192, 1))


def _inception_v3_count() -> int:
    stem = _basic(3, 32, 3) + _basic(32, 32, 3) + _basic(32, 64, 3) + _basic(64, 80, 1) + _basic(80, 192, 3)
    return (stem + _inception_a(192, 32) + _inception_a(256, 64) + _inception_a(288, 64)
            + _inception_b(288) + _inception_c(768, 128) + _inception_c(768, 160) + _inception_c(768, 160)
            + _inception_c(768, 192) + _inception_d(768) + _inception_e(1280) + _inception_e(2048))


_COUNTERS = {
    BackboneId.RESNET18: _resnet18_count,
    BackboneId.DENSENET121: _densenet121_count,
    BackboneId.INCEPTIONV3: _inception_v3_count,
}


def headless_param_count(backbone_id) -> int:
    """Parameters of the headless architecture (aux branch excluded for Inception V3)."""
    return _COUNTERS[BackboneId.parse(backbone_id)]()


def published_param_count(backbone_id) -> int:
    """Headless count plus the original 1000-class ImageNet classifier."""
    return headless_param_count(backbone_id) + published_head_params(backbone_id)
