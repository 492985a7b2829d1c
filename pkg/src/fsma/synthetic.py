"""Synthetic image corpora for desk-scale runs and tests.

Each class gets a base RGB color centered in a distinct cell of the same
1/16 quantization grid the stub-gauss backbone keys its cluster centers on;
per-pixel jitter stays well inside the cell, so every image of a class maps
to the same feature-cluster center while remaining a distinct file. The
generator writes tiny PNGs, a dataset manifest (JSONL) and a bound session
manifest, giving a complete runnable experiment with no real data.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import GAUSS_GRID, ImageRecord
from .errors import ValidationError
from .manifest import (
    ClassEntry,
    SessionManifest,
    SessionSpec,
    save_manifest,
    save_records,
    validate_manifest,
)

JITTER = 3  # max per-pixel deviation from the base color, in uint8 steps


def class_base_colors(n_classes: int, seed: int) -> np.ndarray:
    """Distinct per-class uint8 base colors on cell centers of the grid."""
    if n_classes > GAUSS_GRID**3:
        raise ValidationError(f"at most {GAUSS_GRID ** 3} distinct classes supported")
    rng = np.random.default_rng([seed, 0xC0102])
    cells = rng.choice(GAUSS_GRID**3, size=n_classes, replace=False)
    r, g, b = cells // (GAUSS_GRID**2), (cells // GAUSS_GRID) % GAUSS_GRID, cells % GAUSS_GRID
    centers = (np.stack([r, g, b], axis=1) + 0.5) / GAUSS_GRID
    return np.round(centers * 255).astype(np.uint8)


def _write_image(path: Path, base: np.ndarray, size: int, rng: np.random.Generator) -> None:
    jitter = rng.integers(-JITTER, JITTER + 1, size=(size, size, 3))
    pixels = np.clip(base.astype(np.int64) + jitter, 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def make_synthetic_corpus(
    root: str | Path,
    n_base: int = 16,
    n_sessions: int = 7,
    way: int = 2,
    shot: int = 5,
    train_per_class: int = 40,
    test_per_class: int = 10,
    image_size: int = 16,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Write a clustered PNG corpus plus both manifests under ``root``.

    Base classes get ``train_per_class`` training images; each incremental
    class gets exactly ``shot`` support images. Every class gets
    ``test_per_class`` test images. Returns (session manifest path, dataset
    manifest path).
    """
    if n_sessions < 1 or way < 1 or shot < 1:
        raise ValidationError("n_sessions, way and shot must be >= 1")
    root = Path(root)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    n_classes = n_base + way * (n_sessions - 1)
    colors = class_base_colors(n_classes, seed)
    labels = [f"gen{i:02d}" for i in range(n_classes)]
    rng = np.random.default_rng([seed, 0x1A6E5])

    records: list[ImageRecord] = []
    sessions: list[SessionSpec] = []
    class_idx = 0
    for sid in range(1, n_sessions + 1):
        session_labels = (
            labels[:n_base] if sid == 1 else labels[class_idx : class_idx + way]
        )
        entries = []
        for label in session_labels:
            color = colors[labels.index(label)]
            n_support = train_per_class if sid == 1 else shot
            support_split = "train" if sid == 1 else "support"
            support_ids, test_ids = [], []
            for j in range(n_support + test_per_class):
                split = support_split if j < n_support else "test"
                image_id = f"{label}-{split}-{j:03d}"
                path = images_dir / f"{image_id}.png"
                _write_image(path, color, image_size, rng)
                records.append(
                    ImageRecord(
                        image_id=image_id,
                        path=str(path),
                        class_label=label,
                        session_id=sid,
                        split=split,
                    )
                )
                (support_ids if split != "test" else test_ids).append(image_id)
            entries.append(ClassEntry(label, support_ids=support_ids, test_ids=test_ids))
        sessions.append(
            SessionSpec(
                id=sid,
                classes=entries,
                way=way if sid > 1 else None,
                shot=shot if sid > 1 else None,
            )
        )
        class_idx += len(session_labels)

    dataset_path = root / "dataset.jsonl"
    save_records(dataset_path, records)
    manifest = SessionManifest(sessions=sessions, dataset=str(dataset_path))
    validate_manifest(manifest)
    manifest_path = root / "sessions.json"
    save_manifest(manifest, manifest_path)
    return manifest_path, dataset_path
