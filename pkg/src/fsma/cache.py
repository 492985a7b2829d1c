"""On-disk feature cache for extracted block-token stacks.

Layout: ``<root>/<weights_id>/<preprocess>/<image_id>.bin`` (row-major
float64 tokens) plus ``<image_id>.meta`` (JSON sidecar: shape, dtype, sha256,
key fields, created_at). Keys are namespaced by weights_id and preprocess so
backbone swaps never alias.

Writes go through a temp file and ``os.replace`` into place, so concurrent
writers are safe and readers never observe a partial entry. A checksum
mismatch on read is logged and the entry is treated as absent, which makes
the caller re-extract.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import uuid
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, BlockTokenStack, ImageRecord, extract_stack
from .errors import DecodeError, StorageError, ValidationError

log = logging.getLogger(__name__)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".tmp-{uuid.uuid4().hex}-{path.name}")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise StorageError(f"cannot write {path}: {exc}")


class FeatureCache:
    """Checksummed, atomically-written store of (image, backbone) -> stack."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _paths(self, spec: BackboneSpec, image_id: str) -> tuple[Path, Path]:
        base = self.root / spec.weights_id / spec.preprocess
        return base / f"{image_id}.bin", base / f"{image_id}.meta"

    def has(self, spec: BackboneSpec, image_id: str) -> bool:
        bin_path, meta_path = self._paths(spec, image_id)
        return bin_path.exists() and meta_path.exists()

    def get(self, spec: BackboneSpec, image_id: str) -> np.ndarray | None:
        """Return the cached stack, or None when absent or corrupt."""
        bin_path, meta_path = self._paths(spec, image_id)
        try:
            meta = json.loads(meta_path.read_text())
            raw = bin_path.read_bytes()
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError) as exc:
            log.warning("cache entry %s unreadable (%s); treating as absent", bin_path, exc)
            return None
        if _sha256(raw) != meta.get("sha256"):
            log.warning("cache entry %s failed checksum; treating as absent", bin_path)
            return None
        tokens = np.frombuffer(raw, dtype=np.dtype(meta["dtype"]))
        return tokens.reshape(meta["shape"]).copy()

    def put(self, spec: BackboneSpec, stack: BlockTokenStack) -> None:
        """Atomically persist one stack under its (image, backbone) key."""
        tokens = np.ascontiguousarray(stack.tokens)
        bin_path, meta_path = self._paths(spec, stack.image_id)
        try:
            bin_path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create cache dir {bin_path.parent}: {exc}")
        raw = tokens.tobytes()
        meta = {
            "image_id": stack.image_id,
            "weights_id": spec.weights_id,
            "preprocess": spec.preprocess,
            "shape": list(tokens.shape),
            "dtype": tokens.dtype.name,
            "sha256": _sha256(raw),
            "created_at": time.time(),
        }
        _atomic_write(bin_path, raw)
        _atomic_write(meta_path, json.dumps(meta, indent=1).encode())


class ExtractionSummary:
    """Counts from a batch extraction pass."""

    def __init__(self):
        self.extracted = 0
        self.cache_hits = 0
        self.skipped: list[tuple[str, str]] = []

    def as_dict(self) -> dict:
        return {
            "extracted": self.extracted,
            "cache_hits": self.cache_hits,
            "skipped": [{"image_id": i, "reason": r} for i, r in self.skipped],
        }


class StackProvider:
    """Cache-aware access to block-token stacks for a set of records."""

    def __init__(
        self,
        records: dict[str, ImageRecord],
        spec: BackboneSpec,
        cache: FeatureCache | None = None,
        strict: bool = True,
    ):
        self.records = records
        self.spec = spec
        self.cache = cache
        self.strict = strict

    def tokens(self, image_id: str) -> np.ndarray:
        """The (n_blocks, token_dim) stack for one image, extracting on miss."""
        if image_id not in self.records:
            raise ValidationError(f"image_id {image_id!r} not in dataset manifest")
        if self.cache is not None:
            hit = self.cache.get(self.spec, image_id)
            if hit is not None:
                return hit
        stack = extract_stack(self.records[image_id], self.spec)
        if self.cache is not None:
            self.cache.put(self.spec, stack)
        return stack.tokens

    def tokens_batch(self, image_ids: list[str]) -> np.ndarray:
        """Stacks for several images as one (len(ids), n, d0) array."""
        return np.stack([self.tokens(i) for i in image_ids])

    def ensure(self, image_ids: list[str]) -> ExtractionSummary:
        """Populate the cache for every id; in non-strict mode decode
        failures are skipped with a logged warning instead of aborting."""
        summary = ExtractionSummary()
        for image_id in image_ids:
            if image_id not in self.records:
                raise ValidationError(f"image_id {image_id!r} not in dataset manifest")
            if self.cache is not None and self.cache.get(self.spec, image_id) is not None:
                summary.cache_hits += 1
                continue
            try:
                stack = extract_stack(self.records[image_id], self.spec)
            except DecodeError as exc:
                if self.strict:
                    raise
                log.warning("skipping %s: %s", image_id, exc)
                summary.skipped.append((image_id, str(exc)))
                continue
            if self.cache is not None:
                self.cache.put(self.spec, stack)
            summary.extracted += 1
        return summary
