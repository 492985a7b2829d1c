"""Dataset and session manifests.

Two file formats:

* **dataset manifest** — JSONL, one image record per line with fields
  image_id, path, class_label, session_id, split (train|support|test).
* **session manifest** — JSON describing the incremental schedule:
  ``sessions[].{id, way, shot, classes[].{label, support_ids[], test_ids[]}}``
  plus an optional ``dataset`` field pointing at the records file (relative
  paths resolve against the manifest's directory).

A session manifest may be a bare *schedule* (labels only, no image ids): the
bundled schedules under ``fsma/manifests/`` describe the 28-generator
composition (16 GAN base classes, six 2-way incremental sessions) and its
8/12-class prior/recent base subsets without shipping any images.
:func:`bind_manifest` turns a schedule into a runnable manifest by filling
support/test ids from a dataset manifest, sampling support shots with a
seeded RNG where needed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .backbone import ImageRecord
from .errors import ValidationError

DEFAULT_WAY = 2
DEFAULT_SHOT = 5

BUNDLED_SCHEDULES = (
    "base16-full",
    "base8-prior",
    "base8-recent",
    "base12-prior",
    "base12-recent",
)


# ---------------------------------------------------------------------------
# dataset manifests (image records)
# ---------------------------------------------------------------------------

def load_records(path: str | Path) -> dict[str, ImageRecord]:
    """Parse a JSONL dataset manifest into an id-keyed record map."""
    records: dict[str, ImageRecord] = {}
    base = Path(path).parent
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read dataset manifest {path}: {exc}")
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rec = ImageRecord(
                image_id=row["image_id"],
                path=str((base / row["path"]).resolve())
                if not Path(row["path"]).is_absolute()
                else row["path"],
                class_label=row["class_label"],
                session_id=int(row["session_id"]),
                split=row["split"],
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad record: {exc}")
        if rec.image_id in records:
            raise ValidationError(f"{path}:{lineno}: duplicate image_id {rec.image_id!r}")
        records[rec.image_id] = rec
    return records


def save_records(path: str | Path, records: list[ImageRecord]) -> None:
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {
                    "image_id": r.image_id,
                    "path": r.path,
                    "class_label": r.class_label,
                    "session_id": r.session_id,
                    "split": r.split,
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# session manifests
# ---------------------------------------------------------------------------

@dataclass
class ClassEntry:
    label: str
    support_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)


@dataclass
class SessionSpec:
    id: int
    classes: list[ClassEntry]
    way: int | None = None
    shot: int | None = None

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.classes]


@dataclass
class SessionManifest:
    sessions: list[SessionSpec]
    dataset: str | None = None

    @property
    def base_session(self) -> SessionSpec:
        return self.sessions[0]

    @property
    def incremental_sessions(self) -> list[SessionSpec]:
        return self.sessions[1:]

    @property
    def all_labels(self) -> list[str]:
        return [lab for s in self.sessions for lab in s.labels]

    @property
    def is_bound(self) -> bool:
        """True when every class carries support and test image ids."""
        return all(c.support_ids and c.test_ids for s in self.sessions for c in s.classes)

    def seen_labels(self, session_id: int) -> list[str]:
        return [lab for s in self.sessions if s.id <= session_id for lab in s.labels]


def validate_manifest(manifest: SessionManifest) -> None:
    """Structural validation shared by load, bind and save paths."""
    if not manifest.sessions:
        raise ValidationError("manifest has no sessions")
    manifest.sessions.sort(key=lambda s: s.id)
    ids = [s.id for s in manifest.sessions]
    if ids != list(range(1, len(ids) + 1)):
        raise ValidationError(f"session ids must be contiguous from 1, got {ids}")

    seen: dict[str, int] = {}
    offenders = []
    for s in manifest.sessions:
        if not s.classes:
            raise ValidationError(f"session {s.id} has no classes")
        for c in s.classes:
            if c.label in seen:
                offenders.append((c.label, seen[c.label], s.id))
            seen[c.label] = s.id
    if offenders:
        listing = ", ".join(f"{lab!r} (sessions {a} and {b})" for lab, a, b in offenders)
        raise ValidationError(f"class labels must be disjoint across sessions: {listing}")

    for s in manifest.sessions:
        if s.way is not None and s.way != len(s.classes):
            raise ValidationError(
                f"session {s.id}: way={s.way} but {len(s.classes)} classes listed"
            )
        for c in s.classes:
            dup = set(c.support_ids) & set(c.test_ids)
            if dup:
                raise ValidationError(
                    f"session {s.id} class {c.label!r}: ids in both support and "
                    f"test: {sorted(dup)[:5]}"
                )
            if s.shot is not None and c.support_ids and len(c.support_ids) != s.shot:
                raise ValidationError(
                    f"session {s.id} class {c.label!r}: {len(c.support_ids)} "
                    f"support ids, shot={s.shot}"
                )
            if c.support_ids and not c.test_ids:
                raise ValidationError(
                    f"session {s.id} class {c.label!r}: missing test split"
                )


def _manifest_from_dict(data: dict, base_dir: Path | None) -> SessionManifest:
    try:
        sessions = []
        for s in data["sessions"]:
            classes = [
                ClassEntry(
                    label=c["label"],
                    support_ids=list(c.get("support_ids", [])),
                    test_ids=list(c.get("test_ids", [])),
                )
                for c in s["classes"]
            ]
            sessions.append(
                SessionSpec(
                    id=int(s["id"]),
                    classes=classes,
                    way=s.get("way"),
                    shot=s.get("shot"),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed session manifest: {exc}")
    dataset = data.get("dataset")
    if dataset and base_dir is not None and not Path(dataset).is_absolute():
        dataset = str((base_dir / dataset).resolve())
    manifest = SessionManifest(sessions=sessions, dataset=dataset)
    validate_manifest(manifest)
    return manifest


def load_manifest(path: str | Path) -> SessionManifest:
    """Load and validate a session manifest file."""
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read session manifest {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}")
    return _manifest_from_dict(data, p.parent)


def manifest_to_dict(manifest: SessionManifest) -> dict:
    sessions = []
    for s in manifest.sessions:
        entry: dict = {"id": s.id}
        if s.way is not None:
            entry["way"] = s.way
        if s.shot is not None:
            entry["shot"] = s.shot
        entry["classes"] = [
            {"label": c.label, "support_ids": c.support_ids, "test_ids": c.test_ids}
            if (c.support_ids or c.test_ids)
            else {"label": c.label}
            for c in s.classes
        ]
        sessions.append(entry)
    out: dict = {"schema": "fsma-session-manifest-v1"}
    if manifest.dataset:
        out["dataset"] = manifest.dataset
    out["sessions"] = sessions
    return out


def save_manifest(manifest: SessionManifest, path: str | Path) -> None:
    validate_manifest(manifest)
    Path(path).write_text(json.dumps(manifest_to_dict(manifest), indent=2) + "\n")


def manifest_sha256(manifest: SessionManifest) -> str:
    """Content hash used in report config snapshots."""
    blob = json.dumps(manifest_to_dict(manifest), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def bundled_schedule(name: str) -> SessionManifest:
    """One of the shipped 28-generator schedules (labels only, no ids)."""
    if name not in BUNDLED_SCHEDULES:
        raise ValidationError(
            f"unknown bundled schedule {name!r}; available: {', '.join(BUNDLED_SCHEDULES)}"
        )
    blob = resources.files("fsma.manifests").joinpath(f"{name}.json").read_text()
    return _manifest_from_dict(json.loads(blob), None)


# ---------------------------------------------------------------------------
# binding schedules to concrete corpora
# ---------------------------------------------------------------------------

def bind_manifest(
    schedule: SessionManifest,
    records: dict[str, ImageRecord],
    shot: int = DEFAULT_SHOT,
    seed: int = 0,
    dataset_path: str | None = None,
) -> SessionManifest:
    """Fill a schedule's support/test ids from a dataset manifest.

    Base-session classes take every train/support record; incremental classes
    get exactly ``shot`` support ids (seeded sample when more are available).
    Test ids are all records with split="test". Records must carry the
    session_id their class is scheduled in.
    """
    by_label: dict[str, list[ImageRecord]] = {}
    for rec in records.values():
        by_label.setdefault(rec.class_label, []).append(rec)

    rng = np.random.default_rng(seed)
    sessions = []
    for s in schedule.sessions:
        classes = []
        for c in s.classes:
            recs = sorted(by_label.get(c.label, []), key=lambda r: r.image_id)
            if not recs:
                raise ValidationError(f"no records for class {c.label!r}")
            bad = [r.image_id for r in recs if r.session_id != s.id]
            if bad:
                raise ValidationError(
                    f"class {c.label!r} is scheduled in session {s.id} but records "
                    f"{bad[:3]} carry a different session_id"
                )
            pool = [r.image_id for r in recs if r.split in ("train", "support")]
            test_ids = [r.image_id for r in recs if r.split == "test"]
            if not test_ids:
                raise ValidationError(f"class {c.label!r}: missing test split")
            if s.id == 1:
                support = pool
            else:
                if len(pool) < shot:
                    raise ValidationError(
                        f"class {c.label!r}: {len(pool)} support candidates, need {shot}"
                    )
                if len(pool) > shot:
                    support = sorted(rng.choice(pool, size=shot, replace=False).tolist())
                else:
                    support = pool
            if not support:
                raise ValidationError(f"class {c.label!r}: no support/train records")
            classes.append(ClassEntry(c.label, support_ids=support, test_ids=test_ids))
        way = s.way if s.id > 1 else None
        sessions.append(
            SessionSpec(id=s.id, classes=classes, way=way, shot=shot if s.id > 1 else None)
        )
    bound = SessionManifest(sessions=sessions, dataset=dataset_path)
    validate_manifest(bound)
    return bound
