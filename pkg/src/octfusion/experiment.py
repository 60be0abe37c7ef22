"""Config-driven experiment runner: split -> cache -> train -> evaluate -> report."""
from __future__ import annotations

import copy
import enum
import hashlib
import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .backbones import (
    BACKBONE_ORDER,
    DISPLAY_NAMES,
    FEATURE_DIMS,
    BackboneId,
    canonical_order,
    headless_param_count,
    load_backbones,
    published_param_count,
)
from .cache import FeatureCache, cache_features, load_fused, resolve_cache_dir
from .data import CLASSES, DatasetManifest, Protocol, SplitPlan, atomic_write_text, build_manifest, make_full_split, make_kshot_split
from .errors import ConfigError, FusionError
from .head import CountMode, TaskHead, TaskHeadConfig, count_params, load_head, save_head
from .metrics import MetricsReport, evaluate, mean_report
from .optim import AdamHyperparams
from .reporting import AuditRow, Layout, render_report
from .trainer import Selection, TrainConfig, predict, train_head, write_history

log = logging.getLogger(__name__)


class RunMode(str, enum.Enum):
    FROZEN_HEAD = "frozen_head"
    FINETUNE_ALL = "finetune_all"
    FROM_SCRATCH = "from_scratch"


def _parse_enum(cls, value):
    v = str(value).strip().lower().replace("-", "_")
    for m in cls:
        if v in (m.value, m.name.lower()):
            return m
    raise ConfigError(f"unknown {cls.__name__} {value!r}")


@dataclass
class SyntheticData:
    per_class: int = 120
    separation: float | None = None  # default 10 * sqrt(dim)
    seed: int = 0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    backbones: list = field(default_factory=lambda: list(BACKBONE_ORDER))
    mode: RunMode = RunMode.FROZEN_HEAD
    protocol: Protocol = Protocol.FULL_500
    k: int | None = None
    subsample_pool: bool = False
    seeds: list = field(default_factory=lambda: [0])
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden_dim: int = 1024
    dropout_p: float = 0.5
    dataset_root: str | None = None
    synthetic: SyntheticData | None = None
    weights_dir: str | None = None
    cache_dir: str | None = None
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.backbones:
            raise ConfigError("backbones must be a nonempty subset of the three backbones")
        self.backbones = canonical_order(self.backbones)
        if self.protocol is Protocol.KSHOT and (self.k is None or self.k < 1):
            raise ConfigError("kshot protocol needs k >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.dataset_root is None and self.synthetic is None:
            raise ConfigError("configure data.root or data.synthetic")
        if self.synthetic is not None and self.mode is not RunMode.FROZEN_HEAD:
            raise ConfigError("synthetic features only support the frozen_head mode")
        self.head_config  # validates head dimensions

    @property
    def head_config(self) -> TaskHeadConfig:
        return TaskHeadConfig.for_backbones(self.backbones, hidden_dim=self.hidden_dim, num_classes=len(CLASSES),
                                            dropout_p=self.dropout_p)

    @property
    def model_label(self) -> str:
        label = "+".join(DISPLAY_NAMES[b] for b in self.backbones)
        return label if self.mode is RunMode.FROZEN_HEAD else f"{label} [{self.mode.value}]"

    @property
    def split_label(self) -> str:
        return f"{self.k}-shot" if self.protocol is Protocol.KSHOT else "full-500"

    def resolved(self) -> dict:
        """Everything that determines results; paths are left out."""
        t = self.train
        return {
            "backbones": [b.value for b in self.backbones],
            "mode": self.mode.value,
            "protocol": self.protocol.value,
            "k": self.k,
            "subsample_pool": self.subsample_pool,
            "seeds": list(self.seeds),
            "train": {"epochs": t.epochs, "batch_size": t.batch_size, "selection": t.selection.value,
                      "adam": asdict(t.adam)},
            "head": asdict(self.head_config),
            "synthetic": asdict(self.synthetic) if self.synthetic else None,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()


# ------------------------------------------------------------------ config I/O


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    known = {"name", "backbones", "mode", "protocol", "seeds", "train", "head", "data", "paths", "experiments"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    proto = d.get("protocol", "full_500")
    if isinstance(proto, dict):
        pname, k, sub = proto.get("name", "kshot"), proto.get("k"), bool(proto.get("subsample_pool", False))
    else:
        pname, k, sub = proto, None, False
        if str(pname).lower().endswith("shot") and str(pname)[:-4].rstrip("-_").isdigit():
            pname, k = "kshot", int(str(pname)[:-4].rstrip("-_"))
    tr = d.get("train", {}) or {}
    adam = AdamHyperparams(
        alpha=float(tr.get("lr", 1e-4)),
        beta1=float(tr.get("beta1", 0.9)),
        beta2=float(tr.get("beta2", 0.999)),
        epsilon=float(tr.get("epsilon", 1e-8)),
    )
    train = TrainConfig(epochs=int(tr.get("epochs", 50)), batch_size=int(tr.get("batch_size", 32)),
                        seed=0, adam=adam, selection=Selection.parse(tr.get("select", "best")))
    head = d.get("head", {}) or {}
    data = d.get("data", {}) or {}
    paths = d.get("paths", {}) or {}
    synth = data.get("synthetic")
    if synth is True:
        synth = {}
    seeds = d.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    return ExperimentConfig(
        name=str(d.get("name", "experiment")),
        backbones=d.get("backbones", [b.value for b in BACKBONE_ORDER]),
        mode=_parse_enum(RunMode, d.get("mode", "frozen_head")),
        protocol=_parse_enum(Protocol, pname),
        k=None if k is None else int(k),
        subsample_pool=sub,
        seeds=[int(s) for s in seeds],
        train=train,
        hidden_dim=int(head.get("hidden_dim", 1024)),
        dropout_p=float(head.get("dropout_p", 0.5)),
        dataset_root=data.get("root"),
        synthetic=SyntheticData(**synth) if synth is not None else None,
        weights_dir=paths.get("weights_dir"),
        cache_dir=paths.get("cache_dir"),
        output_dir=paths.get("output_dir", "runs"),
    )


def load_configs(path, overrides: dict | None = None) -> list[ExperimentConfig]:
    """Read a YAML file; an ``experiments`` list expands into one config per entry."""
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    overrides = overrides or {}
    grid = raw.pop("experiments", None)
    if not grid:
        return [config_from_dict(_merge(raw, overrides))]
    return [config_from_dict(_merge(_merge(raw, entry), overrides)) for entry in grid]


# ------------------------------------------------------------------ synthetic


def synth_fixture(classes: int = 4, per_class: int = 20, dim: int = 3584, separation: float | None = None,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Unit-variance Gaussian blobs whose centers sit pairwise ``separation`` apart."""
    if per_class < 2:
        raise ConfigError("per_class must be >= 2 (BatchNorm needs batches of two)")
    if dim < classes:
        raise ConfigError("dim must be at least the number of classes")
    separation = 10.0 * np.sqrt(dim) if separation is None else float(separation)
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
    centers = basis.T * (separation / np.sqrt(2.0))
    labels = np.repeat(np.arange(classes), per_class)
    feats = centers[labels] + rng.standard_normal((labels.size, dim))
    return feats, labels


# ------------------------------------------------------------- feature sources


class SyntheticSource:
    def __init__(self, cfg: ExperimentConfig):
        s = cfg.synthetic
        dim = cfg.head_config.input_dim
        feats, labels = synth_fixture(len(CLASSES), s.per_class, dim, s.separation, s.seed)
        ids = [f"synth/{CLASSES[l]}/{i:05d}" for i, l in enumerate(labels)]
        self.manifest = DatasetManifest.from_labels(ids, labels)
        self.rows = {i: r for i, r in zip(ids, feats)}
        self.backbone_digests = {}
        self.failures = {}

    def prepare(self, ids):
        pass

    def matrix(self, ids) -> np.ndarray:
        return np.stack([self.rows[i] for i in ids]) if ids else np.zeros((0, len(next(iter(self.rows.values())))))


class CachedSource:
    def __init__(self, cfg: ExperimentConfig, manifest: DatasetManifest | None = None):
        self.manifest = manifest or build_manifest(cfg.dataset_root)
        self.backbones = load_backbones(cfg.backbones, cfg.weights_dir)
        self.cache = FeatureCache(resolve_cache_dir(cfg.cache_dir))
        self.backbone_digests = {b.id.value: b.weights_digest for b in self.backbones}
        self.failures = {}

    def prepare(self, ids):
        res = cache_features(self.manifest, sorted(ids), self.backbones, self.cache)
        self.failures.update(res.failures)
        log.info("cache: %d hits, %d computed, %d failures", res.hits, res.computed, len(res.failures))

    def matrix(self, ids) -> np.ndarray:
        return load_fused(self.manifest, ids, self.backbones, self.cache).astype(np.float64)

    def current_digests(self) -> dict:
        return {b.id.value: b.current_digest() for b in self.backbones}


def make_source(cfg: ExperimentConfig):
    return SyntheticSource(cfg) if cfg.synthetic is not None else CachedSource(cfg)


def make_split(cfg: ExperimentConfig, manifest: DatasetManifest, seed: int) -> SplitPlan:
    if cfg.protocol is Protocol.KSHOT:
        return make_kshot_split(manifest, cfg.k, seed, cfg.subsample_pool)
    return make_full_split(manifest, seed)


# ------------------------------------------------------------------ one seed


def _usable(ids, failures):
    return [i for i in ids if i not in failures]


def train_frozen(cfg: ExperimentConfig, source, split: SplitPlan, seed: int, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source.prepare(split.universe())
    tr, va = _usable(split.train, source.failures), _usable(split.val, source.failures)
    man = source.manifest
    head = TaskHead.init(cfg.head_config, seed)
    trained = train_head(head, source.matrix(tr), man.labels_for(tr), source.matrix(va), man.labels_for(va),
                         replace(cfg.train, seed=seed))
    write_history(trained.history, out_dir / "history.csv")
    ckpt = save_head(trained.head, out_dir / "checkpoint", cfg.backbones, seed, extra={
        "selected_epoch": trained.selected_epoch,
        "selection": trained.selection.value,
        "config_digest": cfg.digest(),
        "split_manifest_digest": split.manifest_digest,
        "backbone_digests": source.backbone_digests,
    })
    return {"head": trained.head, "history": trained.history, "selected_epoch": trained.selected_epoch,
            "checkpoint": str(ckpt)}


def evaluate_frozen(cfg: ExperimentConfig, source, split: SplitPlan, head: TaskHead, seed) -> MetricsReport:
    te = _usable(split.test, source.failures)
    source.prepare(te)
    preds = predict(head, source.matrix(te))
    return evaluate(preds, source.manifest.labels_for(te), cfg.model_label, cfg.split_label, seed)


def _run_full_network(cfg: ExperimentConfig, manifest, split: SplitPlan, seed: int, out_dir: Path) -> dict:
    from safetensors.torch import save_file

    from .finetune import ImageBatches, build_full_model, predict_full, train_full_model, trainable_count

    model = build_full_model(cfg.backbones, cfg.mode.value, cfg.head_config, seed, cfg.weights_dir)
    paths = lambda ids: ImageBatches([manifest.path_for(i) for i in ids])
    model, epoch, history = train_full_model(
        model, paths(split.train), manifest.labels_for(split.train), paths(split.val),
        manifest.labels_for(split.val), replace(cfg.train, seed=seed))
    write_history(history, out_dir / "history.csv")
    ckpt = out_dir / "model.safetensors"
    save_file({k: v.contiguous() for k, v in model.state_dict().items()}, str(ckpt))
    preds = predict_full(model, paths(split.test))
    report = evaluate(preds, manifest.labels_for(split.test), cfg.model_label, cfg.split_label, seed)
    return {"report": report, "history": history, "selected_epoch": epoch, "checkpoint": str(ckpt),
            "trainable": trainable_count(model)}


# ------------------------------------------------------------------ full run


@dataclass
class RunRecord:
    name: str
    config: dict
    config_digest: str
    build: str
    reports: list
    audit: list
    seeds: list
    wall_clock_s: float
    output_dir: str

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config,
            "config_digest": self.config_digest,
            "build": self.build,
            "class_index": {c: i for i, c in enumerate(CLASSES)},
            "seeds": self.seeds,
            "audit": [asdict(a) for a in self.audit],
            "wall_clock_s": self.wall_clock_s,
            "output_dir": self.output_dir,
        }


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_reports(out: Path, reports: list[MetricsReport], layout: Layout, title: str = ""):
    from .plotting import plot_accuracy

    rendered = render_report(reports, layout)
    (out / "metrics.csv").write_text(rendered.csv)
    (out / "table.txt").write_text(rendered.text)
    plot_accuracy(reports, out / "accuracy.png", title)
    return rendered


def run_experiment(cfg: ExperimentConfig, source=None, make_figures: bool = True) -> RunRecord:
    from .plotting import plot_confusion, plot_history

    t0 = time.perf_counter()
    out = Path(cfg.output_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    stage = "load"
    try:
        if cfg.mode is RunMode.FROZEN_HEAD:
            source = source or make_source(cfg)
            manifest = source.manifest
        else:
            manifest = build_manifest(cfg.dataset_root)
        reports, seeds = [], []
        for seed in cfg.seeds:
            sdir = out / f"seed_{seed}"
            sdir.mkdir(parents=True, exist_ok=True)
            stage = "split"
            split = make_split(cfg, manifest, seed)
            split.save(sdir / "split.json")
            if cfg.mode is RunMode.FROZEN_HEAD:
                stage = "train"
                res = train_frozen(cfg, source, split, seed, sdir)
                stage = "evaluate"
                report = evaluate_frozen(cfg, source, split, res["head"], seed)
            else:
                stage = "train"
                res = _run_full_network(cfg, manifest, split, seed, sdir)
                report = res["report"]
            stage = "report"
            (sdir / "metrics.csv").write_text(render_report([report], Layout.TABLE2).csv)
            if make_figures:
                plot_history(res["history"], sdir / "history.png", f"{cfg.model_label}, seed {seed}")
                plot_confusion(report.confusion, sdir / "confusion.png", f"{cfg.model_label}, seed {seed}")
            reports.append(report)
            seeds.append({
                "seed": seed,
                "selected_epoch": res["selected_epoch"],
                "checkpoint": res["checkpoint"],
                "split": {k: len(getattr(split, k)) for k in ("train", "val", "test")},
                "per_class_counts": split.per_class_counts,
                "accuracy": report.accuracy,
                "failures": sorted(getattr(source, "failures", {}) or {}),
            })
        stage = "report"
        layout = Layout.TABLE4 if cfg.protocol is Protocol.KSHOT else Layout.TABLE2
        if make_figures:
            _write_reports(out, reports, layout, cfg.model_label)
        else:
            rendered = render_report(reports, layout)
            (out / "metrics.csv").write_text(rendered.csv)
            (out / "table.txt").write_text(rendered.text)
        if len(reports) > 1:
            (out / "mean_table.txt").write_text(render_report([mean_report(reports)], layout).text)
        if isinstance(source, CachedSource):
            after = source.current_digests()
            if after != source.backbone_digests:
                raise FusionError("a frozen backbone changed during the run")
    except FusionError as exc:
        raise exc.with_stage(stage)
    audit = param_audit([cfg], include_reference_rows=False)
    (out / "audit.txt").write_text(render_report(audit, Layout.TABLE3).text)
    record = RunRecord(cfg.name, {**cfg.resolved(), "name": cfg.name}, cfg.digest(), build_id(), reports, audit,
                       seeds, time.perf_counter() - t0, str(out))
    rec = record.to_dict()
    if isinstance(source, CachedSource):
        rec["backbone_digests"] = source.backbone_digests
    atomic_write_text(out / "run_record.json", json.dumps(rec, indent=2, sort_keys=True) + "\n")
    return record


# ------------------------------------------------------------------ audit


def _ensemble_label(ids) -> str:
    return "+".join(DISPLAY_NAMES[b] for b in ids)


def param_audit(configs=None, include_reference_rows: bool = True, hidden_dim: int = 1024) -> list[AuditRow]:
    """Trainable-parameter rows: single baselines and ensembles in both training modes.

    Baseline rows use the published 1000-class ImageNet heads; the counts for
    the 4-class classifier actually attached during baseline training follow.
    """
    rows: list[AuditRow] = []
    seen = set()

    def add(row):
        key = (row.model, row.training_mode, row.trainable)
        if key not in seen:
            seen.add(key)
            rows.append(row)

    def baseline_rows(bid):
        add(AuditRow(DISPLAY_NAMES[bid], "Learn from scratch", published_param_count(bid), "1000-class ImageNet head"))
        n4 = headless_param_count(bid) + FEATURE_DIMS[bid] * len(CLASSES) + len(CLASSES)
        add(AuditRow(DISPLAY_NAMES[bid], "Learn from scratch", n4, "4-class linear head used in training"))

    def ensemble_rows(ids, head_cfg):
        label = _ensemble_label(ids)
        note = f"head input_dim {head_cfg.input_dim}, hidden {head_cfg.hidden_dim}"
        add(AuditRow(label, "Learn from scratch", count_params(ids, head_cfg, CountMode.FROM_SCRATCH).trainable, note))
        add(AuditRow(label, "Pre-trained (frozen)", count_params(ids, head_cfg, CountMode.FROZEN).trainable, note))

    if include_reference_rows:
        for bid in BACKBONE_ORDER:
            baseline_rows(bid)
        ensemble_rows(list(BACKBONE_ORDER), TaskHeadConfig.for_backbones(BACKBONE_ORDER, hidden_dim=hidden_dim))
    for cfg in configs or []:
        if len(cfg.backbones) == 1 and cfg.mode is not RunMode.FROZEN_HEAD:
            baseline_rows(cfg.backbones[0])
        else:
            ensemble_rows(cfg.backbones, cfg.head_config)
    return rows
