"""Which blocks matter: top-block frequency counting and embedding export.

The counting rule, applied per image and per channel of the scaled weights:
the block holding the largest weight is always counted; the block holding
the second-largest weight is counted too iff it is strictly greater than
half of the largest. Exact argmax ties resolve to the lowest block index.
Summed over images, the histogram shows which feature levels drive
attribution for a given generator.

Embedding export writes per-image mean projected tokens over a selectable
block range (default "low" = blocks 1-2) for external 2-D visualization
tooling; the projection itself is out of scope here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import head as head_mod
from . import kernels
from .errors import StorageError, ValidationError

RULE_DESCRIPTOR = "top1 always; top2 iff strictly > half of top1; ties to lowest block"

LOW_LEVEL_BLOCKS = (1, 2)


@dataclass
class FrequencyHistogram:
    counts: np.ndarray  # int64, length n_blocks
    n_images: int
    class_label: str
    rule: str = RULE_DESCRIPTOR

    def as_dict(self) -> dict:
        return {
            "class_label": self.class_label,
            "n_images": self.n_images,
            "rule": self.rule,
            "counts": {str(i + 1): int(c) for i, c in enumerate(self.counts)},
        }


def block_importance(weights_per_image, class_label: str = "all") -> FrequencyHistogram:
    """Count top-block frequencies over a set of scaled-weight matrices.

    Accepts a list of (n, d1) matrices or one (m, n, d1) array. Image order
    does not affect the result.
    """
    if isinstance(weights_per_image, np.ndarray) and weights_per_image.ndim == 3:
        stack = np.ascontiguousarray(weights_per_image, dtype=np.float64)
    else:
        mats = [np.asarray(w, dtype=np.float64) for w in weights_per_image]
        if not mats:
            raise ValidationError("no weight matrices given")
        shapes = {m.shape for m in mats}
        if len(shapes) > 1 or mats[0].ndim != 2:
            raise ValidationError(f"weight matrices must share one (n, d1) shape: {shapes}")
        stack = np.ascontiguousarray(np.stack(mats))
    if stack.size == 0:
        raise ValidationError("no weight matrices given")
    counts = kernels.count_top_blocks(stack)
    return FrequencyHistogram(counts=counts, n_images=stack.shape[0], class_label=class_label)


def block_importance_by_class(
    weights: np.ndarray, labels: list[str]
) -> dict[str, FrequencyHistogram]:
    """One histogram per class from (m, n, d1) weights and per-image labels."""
    if len(labels) != weights.shape[0]:
        raise ValidationError(f"{weights.shape[0]} weight matrices but {len(labels)} labels")
    out = {}
    for label in dict.fromkeys(labels):
        idx = [i for i, l in enumerate(labels) if l == label]
        out[label] = block_importance(weights[idx], class_label=label)
    return out


def write_histogram(hist: FrequencyHistogram, path: str | Path, csv_path=None) -> None:
    Path(path).write_text(json.dumps(hist.as_dict(), indent=2) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block", "count"])
            for i, c in enumerate(hist.counts):
                writer.writerow([i + 1, int(c)])


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def resolve_block_selector(selector, n_blocks: int) -> list[int]:
    """Turn "low" / "full" / an explicit 1-based block list into indices."""
    if selector == "low":
        blocks = [b for b in LOW_LEVEL_BLOCKS if b <= n_blocks]
    elif selector == "full":
        blocks = list(range(1, n_blocks + 1))
    else:
        try:
            blocks = sorted(int(b) for b in selector)
        except (TypeError, ValueError):
            raise ValidationError(f"bad block selector {selector!r}")
    if not blocks:
        raise ValidationError(f"selector {selector!r} selects no blocks")
    bad = [b for b in blocks if not 1 <= b <= n_blocks]
    if bad:
        raise ValidationError(f"block indices {bad} outside 1..{n_blocks}")
    return blocks


def level_embeddings(
    stacks: np.ndarray, params: head_mod.HeadParams, selector="low"
) -> np.ndarray:
    """Mean of the selected blocks' projected tokens per image, (m, d1)."""
    if stacks.ndim == 2:
        stacks = stacks[None]
    blocks = resolve_block_selector(selector, stacks.shape[1])
    rows = np.array(blocks) - 1
    out = np.empty((stacks.shape[0], params.proj_in.w2.shape[1]))
    for i in range(stacks.shape[0]):
        projected = head_mod.project_tokens(stacks[i], params)
        out[i] = projected[rows].mean(axis=0)
    return out


def export_embeddings(
    image_ids: list[str],
    labels: list[str],
    vectors: np.ndarray,
    directory: str | Path,
    selector="low",
) -> None:
    """Write an embedding table: vectors.bin + manifest.json."""
    if not (len(image_ids) == len(labels) == vectors.shape[0]):
        raise ValidationError("image_ids, labels and vectors disagree in length")
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        mat = np.ascontiguousarray(vectors)
        (d / "vectors.bin").write_bytes(mat.tobytes())
        meta = {
            "schema": "fsma-embedding-table-v1",
            "shape": list(mat.shape),
            "dtype": mat.dtype.name,
            "selector": selector if isinstance(selector, str) else list(selector),
            "image_ids": image_ids,
            "class_labels": labels,
        }
        (d / "manifest.json").write_text(json.dumps(meta, indent=2) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write embedding table to {directory}: {exc}")
