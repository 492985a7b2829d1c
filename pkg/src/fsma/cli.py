"""Batch command-line entry points.

Subcommands: ``extract``, ``train-base``, ``run-sessions``,
``analyze-blocks``, plus the utilities ``make-synthetic`` and
``bind-manifest``. Config precedence is CLI flags > ``--config`` JSON file >
built-in defaults; the effective config is echoed into every output
directory. Outputs land under ``<out>/<run_id>/`` where the run id hashes
the experiment identity (backbone, head and calibration settings, seed,
manifest content) so identical runs are byte-identical and relocatable.

Exit codes: 0 success, 2 validation/usage, 3 runtime/numeric, 4 IO/storage.
``FSMA_CACHE_ROOT`` overrides the cache root when ``--cache-root`` is absent.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, head as head_mod, sessions as sessions_mod
from .backbone import BackboneSpec
from .cache import FeatureCache, StackProvider
from .errors import (
    DecodeError,
    FormatError,
    FsmaError,
    StorageError,
    ValidationError,
)
from .manifest import (
    BUNDLED_SCHEDULES,
    SessionManifest,
    bind_manifest,
    bundled_schedule,
    load_manifest,
    load_records,
    manifest_sha256,
    save_manifest,
)
from .prototypes import CalibrationConfig
from .synthetic import make_synthetic_corpus

log = logging.getLogger("fsma")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_IO = 4

DEFAULTS = {
    "backbone": "vit-l-14",
    "n_blocks": None,
    "token_dim": None,
    "stub_seed": 0,
    "stub_noise": 0.02,
    "alpha": 0.5,
    "tau": 16.0,
    "lr": 1e-3,
    "batch_size": 128,
    "epochs": 20,
    "dropout": 0.5,
    "d1": None,
    "d2": None,
    "seed": 0,
    "strict": False,
    "csv": False,
}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def effective_config(args: argparse.Namespace) -> dict:
    """Overlay defaults <- config file <- explicitly passed flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise StorageError(f"cannot read config file {args.config}: {exc}")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {args.config} is not valid JSON: {exc}")
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def backbone_from_config(cfg: dict) -> BackboneSpec:
    name = cfg["backbone"]
    if name.startswith("stub-"):
        if cfg["n_blocks"] is None or cfg["token_dim"] is None:
            raise ValidationError(
                f"backbone {name!r} needs --n-blocks and --token-dim"
            )
        kwargs = {"n_blocks": cfg["n_blocks"], "token_dim": cfg["token_dim"]}
        if name != "stub-const":
            kwargs["seed"] = cfg["stub_seed"]
        if name == "stub-gauss":
            kwargs["noise"] = cfg["stub_noise"]
        return BackboneSpec.named(name, **kwargs)
    return BackboneSpec.named(name)


def head_config_from(cfg: dict, spec: BackboneSpec, n_classes=None) -> head_mod.HeadConfig:
    return head_mod.HeadConfig(
        n_blocks=spec.n_blocks,
        d0=spec.token_dim,
        d1=cfg["d1"],
        d2=cfg["d2"],
        n_classes=n_classes,
        dropout_rate=cfg["dropout"],
        learning_rate=cfg["lr"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
    )


def _load_inputs(manifest_path: str) -> tuple[SessionManifest | None, dict]:
    """A session manifest (with linked dataset) or a bare dataset manifest."""
    if manifest_path is None:
        raise ValidationError("--manifest is required")
    text = Path(manifest_path)
    if not text.exists():
        raise ValidationError(f"manifest {manifest_path} does not exist")
    head_chars = text.read_text(1024).lstrip()[:1]
    if head_chars == "{":
        manifest = load_manifest(manifest_path)
        if not manifest.dataset:
            raise ValidationError(
                f"session manifest {manifest_path} has no 'dataset' field"
            )
        return manifest, load_records(manifest.dataset)
    return None, load_records(manifest_path)


def _identity_snapshot(cfg: dict, spec: BackboneSpec, manifest=None) -> dict:
    """Path-free config snapshot: what the run computes, not where it writes."""
    snap = {
        k: cfg[k]
        for k in (
            "alpha", "tau", "lr", "batch_size", "epochs", "dropout",
            "d1", "d2", "seed", "strict",
        )
    }
    snap["backbone"] = dataclasses.asdict(spec)
    if manifest is not None:
        snap["manifest_sha256"] = manifest_sha256(manifest)
    return snap


def _run_dir(cfg: dict, out: str, snapshot: dict) -> Path:
    run_id = hashlib.sha256(
        json.dumps(snapshot, sort_keys=True).encode()
    ).hexdigest()[:12]
    d = Path(out) / run_id
    try:
        d.mkdir(parents=True, exist_ok=True)
        echo = dict(snapshot)
        echo["out"] = str(out)
        echo["cache_root"] = cfg.get("cache_root")
        (d / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot prepare output dir {d}: {exc}")
    return d


def _cache_root(args, cfg: dict):
    root = getattr(args, "cache_root", None) or os.environ.get("FSMA_CACHE_ROOT")
    cfg["cache_root"] = root
    return FeatureCache(root) if root else None


def _require_cached(cache: FeatureCache | None, spec, ids) -> None:
    if cache is None:
        return
    missing = [i for i in ids if not cache.has(spec, i)]
    if missing:
        raise ValidationError(
            f"{len(missing)} features missing from cache (first: {missing[0]!r}); "
            "run `fsma extract` over this manifest first"
        )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    cfg = effective_config(args)
    spec = backbone_from_config(cfg)
    manifest, records = _load_inputs(args.manifest)
    cache = _cache_root(args, cfg)
    if cache is None:
        raise ValidationError("extract needs --cache-root (or FSMA_CACHE_ROOT)")
    provider = StackProvider(records, spec, cache, strict=cfg["strict"])
    ids = sorted(records)
    summary = provider.ensure(ids)
    out = _run_dir(cfg, args.out, _identity_snapshot(cfg, spec, manifest))
    (out / "extract_summary.json").write_text(
        json.dumps(summary.as_dict(), indent=2) + "\n"
    )
    print(
        f"extract: {summary.extracted} extracted, {summary.cache_hits} cache hits, "
        f"{len(summary.skipped)} skipped -> {out}"
    )
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = effective_config(args)
    spec = backbone_from_config(cfg)
    manifest, records = _load_inputs(args.manifest)
    if manifest is None:
        raise ValidationError("train-base needs a session manifest, not a bare dataset")
    if not manifest.is_bound:
        raise ValidationError("manifest is a schedule without image ids; bind it first")
    cache = _cache_root(args, cfg)
    base_ids = [i for c in manifest.base_session.classes for i in c.support_ids]
    _require_cached(cache, spec, base_ids)
    provider = StackProvider(records, spec, cache, strict=cfg["strict"])

    head_config = head_config_from(cfg, spec, n_classes=len(manifest.base_session.classes))
    state = sessions_mod.run_base_session(manifest, head_config, provider)

    out = _run_dir(cfg, args.out, _identity_snapshot(cfg, spec, manifest))
    ckpt = out / "checkpoint"
    head_mod.save_checkpoint(
        ckpt,
        state.head_params,
        head_config,
        classes=state.seen_classes,
        extra={"backbone": dataclasses.asdict(spec)},
    )
    with open(out / "train_log.jsonl", "w") as fh:
        for entry in state.train_log:
            fh.write(json.dumps(entry) + "\n")
    final = state.train_log[-1] if state.train_log else {"loss": None, "accuracy": None}
    print(
        f"train-base: {len(base_ids)} images, {state.train_steps} steps, "
        f"final loss {final['loss']}, accuracy {final['accuracy']} -> {ckpt}"
    )
    return EXIT_OK


def _load_checkpoint_with_spec(args, cfg):
    params, head_config, classes = head_mod.load_checkpoint(args.checkpoint)
    meta = json.loads((Path(args.checkpoint) / "manifest.json").read_text())
    spec_dict = meta.get("extra", {}).get("backbone")
    if spec_dict is None:
        spec = backbone_from_config(cfg)
    else:
        spec = BackboneSpec(**spec_dict)
        if getattr(args, "backbone", None) and args.backbone != spec.name:
            raise ValidationError(
                f"checkpoint was extracted with backbone {spec.name!r}, "
                f"got --backbone {args.backbone!r}"
            )
    return params, head_config, classes, spec


def cmd_run_sessions(args) -> int:
    cfg = effective_config(args)
    if not Path(args.checkpoint).exists():
        raise ValidationError(f"checkpoint {args.checkpoint} does not exist")
    params, head_config, classes, spec = _load_checkpoint_with_spec(args, cfg)
    manifest, records = _load_inputs(args.manifest)
    if manifest is None:
        raise ValidationError("run-sessions needs a session manifest")
    if not manifest.is_bound:
        raise ValidationError("manifest is a schedule without image ids; bind it first")
    if manifest.base_session.labels != classes:
        raise ValidationError(
            "manifest base classes do not match the checkpoint's training classes"
        )
    cache = _cache_root(args, cfg)
    all_ids = [
        i for s in manifest.sessions for c in s.classes for i in c.support_ids + c.test_ids
    ]
    _require_cached(cache, spec, all_ids)
    provider = StackProvider(records, spec, cache, strict=cfg["strict"])

    calibration = CalibrationConfig(alpha=cfg["alpha"], tau=cfg["tau"])
    snapshot = _identity_snapshot(cfg, spec, manifest)
    state = sessions_mod.base_state_from_params(manifest, params, head_config, provider)
    entries = [sessions_mod.evaluate_session(state, manifest, provider)]
    for spec_s in manifest.incremental_sessions:
        state = sessions_mod.run_incremental_session(state, spec_s, provider, calibration)
        entries.append(sessions_mod.evaluate_session(state, manifest, provider))
    report = sessions_mod.aggregate_report(entries, config=snapshot, seed=cfg["seed"])

    out = _run_dir(cfg, args.out, snapshot)
    sessions_mod.write_report(report, out / "report.json")
    if cfg["csv"]:
        sessions_mod.write_report_csv(report, out / "report.csv")
    state.store.save(out / "prototypes")
    row = " ".join(f"{a:.2f}" for a in report.accuracy_row)
    print(f"run-sessions: accuracy row [{row}] -> {out / 'report.json'}")
    return EXIT_OK


def cmd_analyze_blocks(args) -> int:
    cfg = effective_config(args)
    if not Path(args.checkpoint).exists():
        raise ValidationError(f"checkpoint {args.checkpoint} does not exist")
    params, head_config, _, spec = _load_checkpoint_with_spec(args, cfg)
    manifest, records = _load_inputs(args.manifest)
    if manifest is None:
        raise ValidationError("analyze-blocks needs a session manifest")
    cache = _cache_root(args, cfg)
    provider = StackProvider(records, spec, cache, strict=cfg["strict"])

    ids, labels = [], []
    for s in manifest.sessions:
        for c in s.classes:
            for i in c.test_ids:
                ids.append(i)
                labels.append(c.label)
    if not ids:
        raise ValidationError("manifest has no test ids to analyze")
    _require_cached(cache, spec, ids)

    stacks = provider.tokens_batch(ids)
    weights = head_mod.block_weights(stacks, params)
    out = _run_dir(cfg, args.out, _identity_snapshot(cfg, spec, manifest))
    hist_dir = out / "histograms"
    hist_dir.mkdir(exist_ok=True)
    per_class = analysis.block_importance_by_class(weights, labels)
    for label, hist in per_class.items():
        csv_path = (hist_dir / f"{label}.csv") if cfg["csv"] else None
        analysis.write_histogram(hist, hist_dir / f"{label}.json", csv_path)
    overall = analysis.block_importance(weights, class_label="all")
    analysis.write_histogram(
        overall, hist_dir / "all.json", (hist_dir / "all.csv") if cfg["csv"] else None
    )
    if args.export_embeddings:
        vectors = analysis.level_embeddings(stacks, params, selector=_selector(args))
        analysis.export_embeddings(
            ids, labels, vectors, out / "embeddings", selector=args.export_embeddings
        )
    print(f"analyze-blocks: {len(per_class)} class histograms -> {hist_dir}")
    return EXIT_OK


def _selector(args):
    raw = args.export_embeddings
    if raw in ("low", "full"):
        return raw
    return [int(b) for b in raw.split(",")]


def cmd_make_synthetic(args) -> int:
    manifest_path, dataset_path = make_synthetic_corpus(
        args.out,
        n_base=args.n_base,
        n_sessions=args.n_sessions,
        way=args.way,
        shot=args.shot,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        image_size=args.image_size,
        seed=args.seed if args.seed is not None else 0,
    )
    print(f"make-synthetic: wrote {manifest_path} and {dataset_path}")
    return EXIT_OK


def cmd_bind_manifest(args) -> int:
    if args.schedule in BUNDLED_SCHEDULES:
        schedule = bundled_schedule(args.schedule)
    else:
        schedule = load_manifest(args.schedule)
    records = load_records(args.dataset)
    bound = bind_manifest(
        schedule,
        records,
        shot=args.shot,
        seed=args.seed if args.seed is not None else 0,
        dataset_path=str(Path(args.dataset).resolve()),
    )
    save_manifest(bound, args.out)
    print(f"bind-manifest: wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, with_head=True) -> None:
    p.add_argument("--manifest", help="session manifest (JSON) or dataset manifest (JSONL)")
    p.add_argument("--backbone", help="vit-l-14 | vit-b-32 | stub-const | stub-hash | stub-gauss")
    p.add_argument("--n-blocks", type=int, dest="n_blocks")
    p.add_argument("--token-dim", type=int, dest="token_dim")
    p.add_argument("--stub-seed", type=int, dest="stub_seed")
    p.add_argument("--stub-noise", type=float, dest="stub_noise")
    p.add_argument("--cache-root", dest="cache_root")
    p.add_argument("--out", default="runs")
    p.add_argument("--seed", type=int)
    p.add_argument("--strict", action="store_const", const=True, default=None)
    p.add_argument("--config", help="JSON file of default overrides")
    p.add_argument("--csv", action="store_const", const=True, default=None)
    if with_head:
        p.add_argument("--alpha", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--epochs", type=int)
        p.add_argument("--dropout", type=float)
        p.add_argument("--d1", type=int)
        p.add_argument("--d2", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsma",
        description="Few-shot class-incremental attribution of image generators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="populate the feature cache")
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-base", help="train the head on the base session")
    _add_common(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("run-sessions", help="run the full incremental schedule")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_run_sessions)

    p = sub.add_parser("analyze-blocks", help="top-block histograms and embedding export")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--export-embeddings",
        nargs="?",
        const="low",
        default=None,
        help="also export level embeddings: low | full | comma-separated blocks",
    )
    p.set_defaults(func=cmd_analyze_blocks)

    p = sub.add_parser("make-synthetic", help="generate a clustered synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-base", type=int, default=16, dest="n_base")
    p.add_argument("--n-sessions", type=int, default=7, dest="n_sessions")
    p.add_argument("--way", type=int, default=2)
    p.add_argument("--shot", type=int, default=5)
    p.add_argument("--train-per-class", type=int, default=40, dest="train_per_class")
    p.add_argument("--test-per-class", type=int, default=10, dest="test_per_class")
    p.add_argument("--image-size", type=int, default=16, dest="image_size")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("bind-manifest", help="fill a schedule's ids from a dataset manifest")
    p.add_argument("--schedule", required=True,
                   help=f"bundled name ({', '.join(BUNDLED_SCHEDULES)}) or a manifest path")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shot", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bind_manifest)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (StorageError, DecodeError, FormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FsmaError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
