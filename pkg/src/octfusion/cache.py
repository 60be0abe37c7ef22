"""On-disk store of per-image frozen-backbone features.

Layout of a cache directory::

    manifest.json        key -> {backbone, offset, dim, sha256}
    <backbone_id>.bin    appended little-endian float32 records

A key is ``image_id|backbone_id|weights_digest|preprocess_digest`` where the
preprocess digest covers both the preprocessing settings and the image bytes,
so a changed image, changed weights or changed preprocessing is a miss.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .backbones import FrozenBackbone, preprocess
from .data import DatasetManifest, atomic_write_text
from .errors import DataError, DecodeError, IOFailure

log = logging.getLogger(__name__)

RECORD_DTYPE = np.dtype("<f4")
MANIFEST_NAME = "manifest.json"


def resolve_cache_dir(cache_dir=None) -> Path:
    cache_dir = cache_dir or os.environ.get("FF_CACHE_DIR")
    if not cache_dir:
        raise IOFailure("no cache directory: pass one or set FF_CACHE_DIR")
    return Path(cache_dir)


def image_digest(spec_digest: str, content_digest: str) -> str:
    return hashlib.sha256(f"{spec_digest}:{content_digest}".encode()).hexdigest()


def cache_key(image_id: str, backbone: FrozenBackbone, preprocess_digest: str) -> str:
    return f"{image_id}|{backbone.id.value}|{backbone.weights_digest}|{preprocess_digest}"


class FeatureCache:
    def __init__(self, directory):
        self.dir = Path(directory)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IOFailure(f"cannot create cache directory {self.dir}: {exc}") from exc
        self.lock = FileLock(str(self.dir / ".lock"))
        self.records = {}
        self.hits = 0
        self.misses = 0
        self.corrupt = 0
        self.reload()

    def reload(self):
        path = self.dir / MANIFEST_NAME
        if path.exists():
            try:
                self.records = json.loads(path.read_text())["records"]
            except (OSError, ValueError, KeyError) as exc:
                raise IOFailure(f"unreadable cache manifest {path}: {exc}") from exc
        else:
            self.records = {}

    def __len__(self):
        return len(self.records)

    def __contains__(self, key):
        return key in self.records

    def _blob(self, backbone_id: str) -> Path:
        return self.dir / f"{backbone_id}.bin"

    def get(self, key: str, verify: bool = False):
        rec = self.records.get(key)
        if rec is None:
            self.misses += 1
            return None
        try:
            with self._blob(rec["backbone"]).open("rb") as fh:
                fh.seek(rec["offset"])
                raw = fh.read(rec["dim"] * RECORD_DTYPE.itemsize)
        except OSError as exc:
            raise IOFailure(f"cannot read cache blob for {key}: {exc}") from exc
        if len(raw) != rec["dim"] * RECORD_DTYPE.itemsize or (verify and hashlib.sha256(raw).hexdigest() != rec["sha256"]):
            self.corrupt += 1
            self.misses += 1
            return None
        self.hits += 1
        return np.frombuffer(raw, dtype=RECORD_DTYPE).copy()

    def put(self, key: str, backbone_id: str, vector) -> None:
        """Append one record; call :meth:`flush` to publish the manifest."""
        raw = np.ascontiguousarray(vector, dtype=RECORD_DTYPE).tobytes()
        try:
            with self._blob(backbone_id).open("ab") as fh:
                offset = fh.tell()
                fh.write(raw)
        except OSError as exc:
            raise IOFailure(f"cannot append to cache blob {backbone_id}: {exc}") from exc
        self.records[key] = {
            "backbone": backbone_id,
            "offset": offset,
            "dim": len(raw) // RECORD_DTYPE.itemsize,
            "sha256": hashlib.sha256(raw).hexdigest(),
        }

    def flush(self) -> None:
        text = json.dumps({"version": 1, "records": self.records}, sort_keys=True)
        try:
            atomic_write_text(self.dir / MANIFEST_NAME, text)
        except OSError as exc:
            raise IOFailure(f"cannot write cache manifest: {exc}") from exc


@dataclass
class CacheResult:
    cache: FeatureCache
    hits: int = 0
    computed: int = 0
    failures: dict = field(default_factory=dict)


def _keys_for(manifest: DatasetManifest, image_id: str, backbone: FrozenBackbone) -> str:
    entry = manifest[image_id]
    return cache_key(image_id, backbone, image_digest(backbone.spec.preprocess_digest, entry.content_digest))


def cache_features(manifest: DatasetManifest, image_ids, backbones, cache, verify: bool = False,
                   batch_size: int = 16) -> CacheResult:
    """Make sure every (image, backbone) pair is cached; computes only what is missing.

    Images that cannot be decoded are listed in ``failures`` and skipped.
    """
    if not isinstance(cache, FeatureCache):
        cache = FeatureCache(cache)
    ids = [e.image_id for e in manifest.entries] if image_ids is None else list(image_ids)
    result = CacheResult(cache)
    with cache.lock:
        cache.reload()
        for bb in backbones:
            todo = []
            for image_id in ids:
                key = _keys_for(manifest, image_id, bb)
                if cache.get(key, verify=verify) is not None:
                    result.hits += 1
                else:
                    todo.append((image_id, key))
            for start in range(0, len(todo), batch_size):
                chunk = todo[start : start + batch_size]
                batch, keys = [], []
                for image_id, key in chunk:
                    if image_id in result.failures:
                        continue
                    try:
                        batch.append(preprocess(manifest.path_for(image_id), bb.spec, image_id))
                        keys.append(key)
                    except DataError as exc:
                        log.warning("skipping %s: %s", image_id, exc)
                        result.failures[image_id] = str(exc)
                if not batch:
                    continue
                feats = bb.extract(batch)
                for key, row in zip(keys, feats):
                    cache.put(key, bb.id.value, row)
                result.computed += len(keys)
            cache.flush()
    return result


def load_fused(manifest: DatasetManifest, image_ids, backbones, cache) -> np.ndarray:
    """Fused (n x sum of widths) float32 matrix, backbone blocks in the given order."""
    if not isinstance(cache, FeatureCache):
        cache = FeatureCache(cache)
    width = sum(bb.spec.feature_dim for bb in backbones)
    out = np.empty((len(image_ids), width), dtype=np.float32)
    for row, image_id in enumerate(image_ids):
        col = 0
        for bb in backbones:
            vec = cache.get(_keys_for(manifest, image_id, bb))
            if vec is None:
                raise DecodeError(f"no cached {bb.id.value} features for {image_id}")
            out[row, col : col + vec.size] = vec
            col += vec.size
    return out
