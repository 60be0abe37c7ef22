"""Dataset manifests and reproducible split plans."""
from __future__ import annotations

import enum
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyClass, InsufficientImages, UnknownClassDirectory

CLASSES = ("CNV", "DME", "DRUSEN", "NORMAL")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}
CLASS_DISPLAY = {"CNV": "CNV", "DME": "DME", "DRUSEN": "Drusen", "NORMAL": "Normal"}
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}

# Per-class (train, val, test) of the 500-image protocol.
SPLIT_500 = {
    "CNV": (119, 357, 1904),
    "DME": (122, 364, 1944),
    "DRUSEN": (121, 365, 1944),
    "NORMAL": (138, 414, 2208),
}
POOL_500_TOTALS = {c: sum(v) for c, v in SPLIT_500.items()}


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    relative_path: str
    label: str
    content_digest: str = ""

    @property
    def label_index(self) -> int:
        return CLASS_INDEX[self.label]


@dataclass
class DatasetManifest:
    entries: list
    root: str = ""
    root_digest: str = ""

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate image ids in manifest")
        self._by_id = {e.image_id: e for e in self.entries}
        if not self.root_digest:
            self.root_digest = self.compute_digest()

    def compute_digest(self) -> str:
        h = hashlib.sha256()
        for e in sorted(self.entries, key=lambda e: e.relative_path):
            h.update(f"{e.image_id}\t{e.relative_path}\t{e.label}\t{e.content_digest}\n".encode())
        return h.hexdigest()

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, image_id: str) -> ManifestEntry:
        return self._by_id[image_id]

    def by_class(self) -> dict:
        out = {c: [] for c in CLASSES}
        for e in self.entries:
            out[e.label].append(e.image_id)
        return {c: sorted(v) for c, v in out.items()}

    def class_counts(self) -> dict:
        return {c: len(v) for c, v in self.by_class().items()}

    def labels_for(self, image_ids) -> np.ndarray:
        return np.array([self._by_id[i].label_index for i in image_ids], dtype=np.int64)

    def path_for(self, image_id: str) -> Path:
        return Path(self.root) / self._by_id[image_id].relative_path

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "root_digest": self.root_digest,
            "entries": [vars(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls([ManifestEntry(**e) for e in d["entries"]], d.get("root", ""), d.get("root_digest", ""))

    @classmethod
    def from_labels(cls, image_ids, labels) -> "DatasetManifest":
        """In-memory manifest (synthetic data, tests): labels are class names or indices."""
        entries = []
        for i, lab in zip(image_ids, labels):
            name = CLASSES[int(lab)] if not isinstance(lab, str) else lab.upper()
            entries.append(ManifestEntry(str(i), str(i), name))
        return cls(entries)


def build_manifest(root, require_all_classes: bool = True, hash_contents: bool = True) -> DatasetManifest:
    """Scan ``<root>/<CLASS>/<images>``; class names are matched case-insensitively."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} is not a directory")
    entries = []
    seen = set()
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        label = sub.name.upper()
        if label not in CLASS_INDEX:
            raise UnknownClassDirectory(f"{sub.name!r} is not one of {CLASSES}")
        if label in seen:
            raise UnknownClassDirectory(f"class {label} appears twice (case variants)")
        seen.add(label)
        files = sorted(p for p in sub.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise EmptyClass(f"class directory {sub.name!r} holds no images")
        for f in files:
            rel = f.relative_to(root).as_posix()
            digest = _sha256_file(f) if hash_contents else ""
            entries.append(ManifestEntry(rel, rel, label, digest))
    if require_all_classes:
        absent = [c for c in CLASSES if c not in seen]
        if absent:
            raise EmptyClass(f"no directory for class(es) {absent}")
    entries.sort(key=lambda e: e.relative_path)
    return DatasetManifest(entries, str(root))


# ------------------------------------------------------------------- split plans


class Protocol(str, enum.Enum):
    FULL_500 = "full_500"
    KSHOT = "kshot"


@dataclass
class SplitPlan:
    protocol: Protocol
    seed: int
    train: list
    val: list
    test: list
    per_class_counts: dict
    k: int | None = None
    manifest_digest: str = ""

    @property
    def name(self) -> str:
        return f"{self.k}-shot" if self.protocol is Protocol.KSHOT else "full-500"

    def universe(self) -> set:
        return set(self.train) | set(self.val) | set(self.test)

    def is_partition(self) -> bool:
        a, b, c = set(self.train), set(self.val), set(self.test)
        sizes_ok = len(a) == len(self.train) and len(b) == len(self.val) and len(c) == len(self.test)
        return sizes_ok and not (a & b) and not (a & c) and not (b & c)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol.value,
            "k": self.k,
            "seed": self.seed,
            "manifest_digest": self.manifest_digest,
            "per_class_counts": self.per_class_counts,
            "train": self.train,
            "val": self.val,
            "test": self.test,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(Protocol(d["protocol"]), d["seed"], list(d["train"]), list(d["val"]), list(d["test"]),
                   d["per_class_counts"], d.get("k"), d.get("manifest_digest", ""))

    def save(self, path) -> Path:
        return atomic_write_text(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _class_rng(seed: int, label: str, purpose: int):
    return np.random.default_rng([seed, CLASS_INDEX[label], purpose])


def draw_pool(manifest: DatasetManifest, seed: int) -> dict:
    """Seeded per-class draw of exactly the 10,000-image pool totals."""
    out = {}
    for label, ids in manifest.by_class().items():
        need = POOL_500_TOTALS[label]
        if len(ids) < need:
            raise InsufficientImages(f"class {label} has {len(ids)} images, the 500-image protocol needs {need}")
        if len(ids) > need:
            pick = _class_rng(seed, label, 0).choice(len(ids), size=need, replace=False)
            ids = sorted(ids[i] for i in pick)
        out[label] = ids
    return out


def make_full_split(manifest: DatasetManifest, seed: int) -> SplitPlan:
    pools = draw_pool(manifest, seed)
    train, val, test, counts = [], [], [], {}
    for label in CLASSES:
        ids = pools[label]
        perm = _class_rng(seed, label, 1).permutation(len(ids))
        ids = [ids[i] for i in perm]
        n_tr, n_va, n_te = SPLIT_500[label]
        train += ids[:n_tr]
        val += ids[n_tr : n_tr + n_va]
        test += ids[n_tr + n_va : n_tr + n_va + n_te]
        counts[label] = {"train": n_tr, "val": n_va, "test": n_te}
    return SplitPlan(Protocol.FULL_500, seed, sorted(train), sorted(val), sorted(test), counts,
                     manifest_digest=manifest.root_digest)


def kshot_counts(total: int, k: int) -> tuple[int, int, int]:
    rest = total - k
    n_val = rest // 10
    return k, n_val, rest - n_val


def make_kshot_split(manifest: DatasetManifest, k: int, seed: int, subsample_pool: bool = False) -> SplitPlan:
    """k training images per class; per class the rest goes 1:9 to val:test (floor on val).

    ``subsample_pool`` first draws the same 10,000-image pool as the
    500-image protocol, for manifests of the full public dataset.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    pools = draw_pool(manifest, seed) if subsample_pool else manifest.by_class()
    train, val, test, counts = [], [], [], {}
    for label in CLASSES:
        ids = pools[label]
        if len(ids) <= k:
            raise InsufficientImages(f"class {label} has {len(ids)} images, {k}-shot needs more than {k}")
        perm = _class_rng(seed, label, 2).permutation(len(ids))
        ids = [ids[i] for i in perm]
        n_tr, n_va, n_te = kshot_counts(len(ids), k)
        train += ids[:n_tr]
        val += ids[n_tr : n_tr + n_va]
        test += ids[n_tr + n_va :]
        counts[label] = {"train": n_tr, "val": n_va, "test": n_te}
    return SplitPlan(Protocol.KSHOT, seed, sorted(train), sorted(val), sorted(test), counts, k=k,
                     manifest_digest=manifest.root_digest)
