"""Class prototypes, training-free calibration, nearest-prototype inference.

A prototype is the unweighted mean of a class's eval-mode embeddings. Novel
classes arriving in incremental sessions get their prototype pulled toward
the base prototypes: with sharpened cosine similarities s_b between the
novel prototype and each base prototype, weights w = softmax(s) give

    calibrated = alpha * novel + (1 - alpha) * sum_b w_b * base_b

so the calibrated vector is a convex combination of the novel prototype and
the base prototypes. Base prototypes are never modified. Classification is
cosine nearest prototype over all classes seen so far, ties broken by store
order.

Zero vectors are rejected everywhere cosine geometry is involved: a zero
embedding signals an upstream head failure and must not be epsilon-patched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegeneracyError, StorageError, ValidationError


@dataclass
class CalibrationConfig:
    """alpha blends novel vs pulled mass; tau sharpens the similarity softmax."""

    alpha: float = 0.5
    tau: float = 16.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must be in [0, 1]")
        if self.tau <= 0.0:
            raise ValidationError("tau must be positive")


@dataclass
class Prototype:
    class_label: str
    vector: np.ndarray
    session_id: int
    calibrated: bool = False


class PrototypeStore:
    """Ordered label -> Prototype map; base labels fixed at construction."""

    def __init__(self):
        self._protos: dict[str, Prototype] = {}
        self.base_labels: list[str] = []

    def __len__(self) -> int:
        return len(self._protos)

    def __contains__(self, label: str) -> bool:
        return label in self._protos

    @property
    def labels(self) -> list[str]:
        return list(self._protos)

    def get(self, label: str) -> Prototype:
        return self._protos[label]

    def add_base(self, proto: Prototype) -> None:
        self._add(proto)
        self.base_labels.append(proto.class_label)

    def add(self, proto: Prototype) -> None:
        self._add(proto)

    def _add(self, proto: Prototype) -> None:
        if proto.class_label in self._protos:
            raise ValidationError(f"duplicate prototype label {proto.class_label!r}")
        self._protos[proto.class_label] = proto

    def base_matrix(self) -> np.ndarray:
        return np.stack([self._protos[l].vector for l in self.base_labels])

    def matrix(self) -> np.ndarray:
        return np.stack([p.vector for p in self._protos.values()])

    def save(self, directory: str | Path) -> None:
        """Vectors as one .bin matrix plus a manifest.json sidecar."""
        d = Path(directory)
        try:
            d.mkdir(parents=True, exist_ok=True)
            mat = np.ascontiguousarray(self.matrix())
            (d / "vectors.bin").write_bytes(mat.tobytes())
            meta = {
                "schema": "fsma-prototype-store-v1",
                "shape": list(mat.shape),
                "dtype": mat.dtype.name,
                "labels": self.labels,
                "session_ids": [p.session_id for p in self._protos.values()],
                "calibrated": [p.calibrated for p in self._protos.values()],
                "base_labels": self.base_labels,
            }
            (d / "manifest.json").write_text(json.dumps(meta, indent=2) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot write prototype store to {directory}: {exc}")

    @staticmethod
    def load(directory: str | Path) -> "PrototypeStore":
        d = Path(directory)
        try:
            meta = json.loads((d / "manifest.json").read_text())
            raw = (d / "vectors.bin").read_bytes()
        except OSError as exc:
            raise StorageError(f"cannot read prototype store at {directory}: {exc}")
        mat = np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])
        store = PrototypeStore()
        for i, label in enumerate(meta["labels"]):
            proto = Prototype(
                class_label=label,
                vector=mat[i].copy(),
                session_id=meta["session_ids"][i],
                calibrated=meta["calibrated"][i],
            )
            if label in meta["base_labels"]:
                store.add_base(proto)
            else:
                store.add(proto)
        return store


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _require_nonzero(vec: np.ndarray, what: str) -> None:
    if not np.any(vec):
        raise DegeneracyError(f"{what} is the zero vector; cosine is undefined")


def compute_prototype(embeddings, class_label: str, session_id: int) -> Prototype:
    """Arithmetic mean of a class's embeddings (uncalibrated)."""
    vecs = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if not vecs:
        raise ValidationError(f"no embeddings given for class {class_label!r}")
    dims = {v.shape for v in vecs}
    if len(dims) > 1 or vecs[0].ndim != 1:
        raise ValidationError(f"inconsistent embedding shapes for {class_label!r}: {dims}")
    mean = np.mean(vecs, axis=0)
    _require_nonzero(mean, f"prototype of {class_label!r}")
    return Prototype(class_label, mean, session_id, calibrated=False)


def similarity(base: Prototype, novel: Prototype, config: CalibrationConfig) -> float:
    """Sharpened cosine similarity tau * cos(base, novel), in [-tau, tau]."""
    _require_nonzero(base.vector, f"base prototype {base.class_label!r}")
    _require_nonzero(novel.vector, f"novel prototype {novel.class_label!r}")
    cos = float(
        np.dot(base.vector, novel.vector)
        / (np.linalg.norm(base.vector) * np.linalg.norm(novel.vector))
    )
    return config.tau * cos


def calibration_weights(
    store: PrototypeStore, novel: Prototype, config: CalibrationConfig
) -> np.ndarray:
    """Softmax over sharpened similarities to every base prototype."""
    if not store.base_labels:
        raise ValidationError("store has no base prototypes")
    sims = np.array(
        [similarity(store.get(l), novel, config) for l in store.base_labels]
    )
    shifted = np.exp(sims - sims.max())
    return shifted / shifted.sum()


def calibrate_prototype(
    store: PrototypeStore, novel: Prototype, config: CalibrationConfig
) -> Prototype:
    """Pull a novel prototype toward the base prototypes.

    Returns a new calibrated prototype; the store (and every base prototype)
    is left untouched.
    """
    if novel.calibrated:
        raise ValidationError(f"prototype {novel.class_label!r} is already calibrated")
    weights = calibration_weights(store, novel, config)
    pulled = weights @ store.base_matrix()
    vector = config.alpha * novel.vector + (1.0 - config.alpha) * pulled
    return Prototype(novel.class_label, vector, novel.session_id, calibrated=True)


def cosine_scores(embedding: np.ndarray, store: PrototypeStore) -> np.ndarray:
    """Cosine similarity of one embedding to every stored prototype."""
    if len(store) == 0:
        raise ValidationError("prototype store is empty")
    emb = np.asarray(embedding, dtype=np.float64)
    _require_nonzero(emb, "embedding")
    mat = store.matrix()
    norms = np.linalg.norm(mat, axis=1)
    return (mat @ emb) / (norms * np.linalg.norm(emb))


def classify(embedding: np.ndarray, store: PrototypeStore) -> tuple[str, np.ndarray]:
    """Nearest-prototype label by cosine; ties go to the earliest label."""
    scores = cosine_scores(embedding, store)
    return store.labels[int(scores.argmax())], scores


def classify_batch(embeddings: np.ndarray, store: PrototypeStore) -> list[str]:
    """Vectorized nearest-prototype labels for (N, d) embeddings."""
    if len(store) == 0:
        raise ValidationError("prototype store is empty")
    emb = np.asarray(embeddings, dtype=np.float64)
    zero_rows = ~np.any(emb, axis=1)
    if zero_rows.any():
        raise DegeneracyError(
            f"zero embedding at rows {np.flatnonzero(zero_rows)[:5].tolist()}"
        )
    mat = store.matrix()
    scores = (emb / np.linalg.norm(emb, axis=1, keepdims=True)) @ (
        mat / np.linalg.norm(mat, axis=1, keepdims=True)
    ).T
    labels = store.labels
    return [labels[i] for i in scores.argmax(axis=1)]
