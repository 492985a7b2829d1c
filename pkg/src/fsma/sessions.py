"""Incremental session protocol: base training, training-free increments,
per-session evaluation reports.

Session 1 trains the head on the base classes and freezes it; every later
session adds ``way`` novel classes from ``shot`` support images each by
computing and calibrating prototypes only — no gradient step ever runs after
the base session. Evaluation at session s covers the union of test sets of
all classes seen so far, classified by cosine nearest prototype, reported as
micro-averaged accuracy plus a per-class breakdown.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import head as head_mod
from .cache import StackProvider
from .errors import ValidationError
from .manifest import SessionManifest, SessionSpec
from .prototypes import (
    CalibrationConfig,
    PrototypeStore,
    calibrate_prototype,
    classify_batch,
    compute_prototype,
)

EMBED_CHUNK = 256


@dataclass
class SessionState:
    current_session: int
    head_params: head_mod.HeadParams
    head_config: head_mod.HeadConfig
    store: PrototypeStore
    seen_classes: list[str]
    head_digest: str
    train_log: list[dict] = field(default_factory=list)
    train_steps: int = 0


@dataclass
class SessionReport:
    session_id: int
    accuracy: float  # percent over all seen-class test samples
    n_correct: int
    n_total: int
    seen_classes: list[str]
    per_class: dict[str, dict]


@dataclass
class EvalReport:
    sessions: list[SessionReport]
    config: dict
    seed: int

    @property
    def accuracy_row(self) -> list[float]:
        return [s.accuracy for s in self.sessions]


def _embed_ids(ids: list[str], provider: StackProvider, params) -> np.ndarray:
    chunks = []
    for start in range(0, len(ids), EMBED_CHUNK):
        stacks = provider.tokens_batch(ids[start : start + EMBED_CHUNK])
        chunks.append(head_mod.embed_batch(stacks, params))
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# protocol steps
# ---------------------------------------------------------------------------

def run_base_session(
    manifest: SessionManifest,
    head_config: head_mod.HeadConfig,
    provider: StackProvider,
) -> SessionState:
    """Train the head on session 1 and build the base prototypes."""
    base = manifest.base_session
    if base.id != 1:
        raise ValidationError(f"first session has id {base.id}, expected 1")
    for c in base.classes:
        if not c.support_ids:
            raise ValidationError(f"base class {c.label!r} has no training images")

    class_order = base.labels
    pairs = []
    for c in base.classes:
        for image_id in c.support_ids:
            pairs.append((provider.tokens(image_id), c.label))
    result = head_mod.train_base(pairs, head_config, class_order=class_order)

    store = PrototypeStore()
    for c in base.classes:
        emb = _embed_ids(c.support_ids, provider, result.params)
        store.add_base(compute_prototype(emb, c.label, session_id=1))

    return SessionState(
        current_session=1,
        head_params=result.params,
        head_config=head_config,
        store=store,
        seen_classes=list(class_order),
        head_digest=head_mod.params_digest(result.params),
        train_log=result.log,
        train_steps=result.total_steps,
    )


def base_state_from_params(
    manifest: SessionManifest,
    params: head_mod.HeadParams,
    head_config: head_mod.HeadConfig,
    provider: StackProvider,
    train_log: list[dict] | None = None,
) -> SessionState:
    """Session-1 state from already-trained parameters (checkpoint path)."""
    base = manifest.base_session
    if base.id != 1:
        raise ValidationError(f"first session has id {base.id}, expected 1")
    store = PrototypeStore()
    for c in base.classes:
        if not c.support_ids:
            raise ValidationError(f"base class {c.label!r} has no training images")
        emb = _embed_ids(c.support_ids, provider, params)
        store.add_base(compute_prototype(emb, c.label, session_id=1))
    return SessionState(
        current_session=1,
        head_params=params,
        head_config=head_config,
        store=store,
        seen_classes=base.labels,
        head_digest=head_mod.params_digest(params),
        train_log=train_log or [],
    )


def run_incremental_session(
    state: SessionState,
    session_spec: SessionSpec,
    provider: StackProvider,
    calibration: CalibrationConfig,
) -> SessionState:
    """Add one session's novel classes by prototype calibration only.

    The head is untouched; the session counter is strictly monotone, so
    replaying or skipping a session is rejected.
    """
    if session_spec.id != state.current_session + 1:
        raise ValidationError(
            f"session {session_spec.id} cannot follow session {state.current_session}"
        )
    shot = session_spec.shot
    for c in session_spec.classes:
        if c.label in state.store:
            raise ValidationError(f"duplicate class label {c.label!r}")
        if not c.support_ids:
            raise ValidationError(f"class {c.label!r} has no support images")
        if shot is not None and len(c.support_ids) != shot:
            raise ValidationError(
                f"class {c.label!r}: {len(c.support_ids)} support images, "
                f"session declares shot={shot}"
            )

    for c in session_spec.classes:
        emb = _embed_ids(c.support_ids, provider, state.head_params)
        proto = compute_prototype(emb, c.label, session_id=session_spec.id)
        state.store.add(calibrate_prototype(state.store, proto, calibration))
        state.seen_classes.append(c.label)

    state.current_session = session_spec.id
    return state


def evaluate_session(
    state: SessionState,
    manifest: SessionManifest,
    provider: StackProvider,
) -> SessionReport:
    """Accuracy over the test sets of every class seen so far."""
    test_ids_by_label = {
        c.label: c.test_ids
        for s in manifest.sessions
        if s.id <= state.current_session
        for c in s.classes
    }
    per_class: dict[str, dict] = {}
    n_correct = 0
    n_total = 0
    for label in state.seen_classes:
        ids = test_ids_by_label.get(label, [])
        if not ids:
            raise ValidationError(f"seen class {label!r} has an empty test set")
        emb = _embed_ids(ids, provider, state.head_params)
        predicted = classify_batch(emb, state.store)
        correct = sum(p == label for p in predicted)
        per_class[label] = {
            "accuracy": 100.0 * correct / len(ids),
            "n_correct": correct,
            "n_total": len(ids),
        }
        n_correct += correct
        n_total += len(ids)
    return SessionReport(
        session_id=state.current_session,
        accuracy=100.0 * n_correct / n_total,
        n_correct=n_correct,
        n_total=n_total,
        seen_classes=list(state.seen_classes),
        per_class=per_class,
    )


def aggregate_report(
    entries: list[SessionReport], config: dict | None = None, seed: int = 0
) -> EvalReport:
    """Combine per-session entries into one report row, sorted by session."""
    if not entries:
        raise ValidationError("no session reports to aggregate")
    ordered = sorted(entries, key=lambda e: e.session_id)
    ids = [e.session_id for e in ordered]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate session ids in report entries: {ids}")
    if ids != list(range(ids[0], ids[0] + len(ids))):
        raise ValidationError(f"gap in session ids: {ids}")
    return EvalReport(sessions=ordered, config=config or {}, seed=seed)


def run_all_sessions(
    manifest: SessionManifest,
    head_config: head_mod.HeadConfig,
    calibration: CalibrationConfig,
    provider: StackProvider,
    config_snapshot: dict | None = None,
) -> tuple[EvalReport, SessionState]:
    """Full protocol: base session, then every incremental session in order."""
    if not manifest.is_bound:
        raise ValidationError(
            "manifest has classes without image ids; bind it to a dataset first"
        )
    state = run_base_session(manifest, head_config, provider)
    entries = [evaluate_session(state, manifest, provider)]
    for spec in manifest.incremental_sessions:
        state = run_incremental_session(state, spec, provider, calibration)
        entries.append(evaluate_session(state, manifest, provider))
    report = aggregate_report(entries, config=config_snapshot, seed=head_config.seed)
    return report, state


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def report_to_dict(report: EvalReport) -> dict:
    return {
        "schema": "fsma-eval-report-v1",
        "seed": report.seed,
        "config": report.config,
        "accuracy_row": report.accuracy_row,
        "sessions": [
            {
                "session_id": s.session_id,
                "accuracy": s.accuracy,
                "n_correct": s.n_correct,
                "n_total": s.n_total,
                "n_classes": len(s.seen_classes),
                "seen_classes": s.seen_classes,
                "per_class": s.per_class,
            }
            for s in report.sessions
        ],
    }


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report), indent=2) + "\n")


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """Accuracy row plus the per-class-by-session accuracy matrix."""
    all_classes = report.sessions[-1].seen_classes
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session"] + [s.session_id for s in report.sessions])
        writer.writerow(["accuracy"] + [f"{s.accuracy:.4f}" for s in report.sessions])
        writer.writerow([])
        writer.writerow(["class"] + [s.session_id for s in report.sessions])
        for label in all_classes:
            row = [label]
            for s in report.sessions:
                cell = s.per_class.get(label)
                row.append(f"{cell['accuracy']:.4f}" if cell else "")
            writer.writerow(row)
