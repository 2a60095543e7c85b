"""Command-line front end.

Subcommands:
  filter-negatives  drop negative samples containing excluded classes
  generate          produce mixed-content samples from a manifest + catalog
  train-toy         train the toy model on the shapes dataset
  score             score images with a checkpoint, writing f32 score maps
  eval              compute AP / FPR@95 / AUROC (and mIoU) from scores+labels
  report            assemble a CSV table, metric figures, and score-map PNGs

Configuration comes from an optional JSON config file; command-line flags
win over config values. Every run appends a provenance record (config hash,
seed, versions) to its output directory.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import IGNORE_ID, OUTLIER_ID, __version__
from .compositor import PasteParams, generate_mixed_batch
from .io import (
    load_manifest,
    read_image,
    read_label_map,
    read_score_map,
    write_label_map,
    write_score_map,
    write_score_png,
)
from .metrics import binary_report, miou
from .negatives import excluded_ids, filter_catalog, load_catalog, load_class_mapping
from .scoring import SCORE_KINDS, score_map
from .trainer import (
    ShapesConfig,
    forward,
    load_checkpoint,
    make_shapes_dataset,
    mix_training_data,
    save_checkpoint,
    train_toy,
)


class ValidationError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    return json.loads(p.read_text())


def _write_provenance(out_dir: Path, subcommand: str, config: dict, seed) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(config, sort_keys=True).encode()
    record = {
        "subcommand": subcommand,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "oodseg_version": __version__,
        "numpy_version": np.__version__,
    }
    with open(out_dir / "provenance.jsonl", "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_filter_negatives(args) -> int:
    catalog = load_catalog(args.catalog)
    mapping = load_class_mapping(args.class_map)
    excluded = excluded_ids(mapping)
    filtered = filter_catalog(catalog, excluded)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        for s in filtered.samples:
            f.write(
                json.dumps(
                    {
                        "image": s.image_ref,
                        "label": s.label_ref,
                        "classes": sorted(s.present_classes),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    print(f"kept {len(filtered)} of {len(catalog)} negative samples")
    return 0


def cmd_generate(args, config: dict) -> int:
    params = PasteParams.from_dict(config.get("paste_params", {}))
    manifest = load_manifest(args.manifest)
    catalog = load_catalog(args.catalog)
    out_dir = Path(args.out)
    _write_provenance(out_dir, "generate", config, args.seed)
    results = generate_mixed_batch(
        manifest, catalog, params, args.seed, out_dir=out_dir, workers=args.workers
    )
    errors = [r for r in results if r["error"]]
    for r in errors:
        print(f"error: {r['stem']}: {r['error']}", file=sys.stderr)
    print(f"generated {len(results) - len(errors)} of {len(results)} samples")
    return 2 if len(errors) == len(results) else 0


def cmd_train_toy(args, config: dict) -> int:
    shapes_cfg = ShapesConfig(**config.get("shapes", {}))
    out_dir = Path(args.out)
    _write_provenance(out_dir, "train-toy", config, args.seed)
    train, test = make_shapes_dataset(shapes_cfg, args.seed)
    mixed = mix_training_data(train, args.seed)
    run = train_toy(
        mixed,
        preset=args.preset,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        num_classes=shapes_cfg.num_classes,
    )
    save_checkpoint(
        out_dir / "model.ckpt",
        run.model,
        {"preset": args.preset, "seed": args.seed, "epochs": args.epochs},
    )
    _dump_json(out_dir / "history.json", run.history)
    test_dir = out_dir / "test"
    test_dir.mkdir(exist_ok=True)
    from .io import write_image

    for i, (image, labels) in enumerate(test):
        stem = f"test_{i:04d}"
        write_image(test_dir / f"{stem}.png", image)
        write_label_map(test_dir / f"{stem}_labels.png", labels)
    print(
        f"trained {args.preset} for {args.epochs} epochs; "
        f"final loss {run.history[-1]['total']:.4f}"
    )
    return 0


def cmd_score(args, config: dict) -> int:
    model, header = load_checkpoint(args.checkpoint)
    images_dir = Path(args.images)
    out_dir = Path(args.out)
    _write_provenance(out_dir, "score", config, None)
    kinds = args.kinds.split(",")
    for kind in kinds:
        if kind not in SCORE_KINDS:
            raise ValidationError(f"unknown score kind {kind!r}")
    image_paths = sorted(
        p for p in images_dir.glob("*.png") if not p.stem.endswith(("_labels", "_pred"))
    )
    if not image_paths:
        raise ValidationError(f"no images found in {images_dir}")
    for path in image_paths:
        image = read_image(path)
        logits, ood = forward(model, image)
        pred = np.argmax(logits, axis=-1).astype(np.uint8)
        write_label_map(out_dir / f"{path.stem}_pred.png", pred)
        for kind in kinds:
            kind_dir = out_dir / kind
            kind_dir.mkdir(parents=True, exist_ok=True)
            smap = score_map(logits, kind, ood_logits=ood)
            write_score_map(kind_dir / f"{path.stem}.f32", smap, kind=kind)
    print(f"scored {len(image_paths)} images with kinds {','.join(kinds)}")
    return 0


def _eval_pairs(scores_path: Path, labels_path: Path):
    """(score file, label file) pairs; directory mode pairs by stem."""
    if scores_path.is_dir():
        pairs = []
        for f32 in sorted(scores_path.glob("*.f32")):
            label = labels_path / f"{f32.stem}_labels.png"
            if not label.exists():
                raise ValidationError(f"no label map for {f32} (expected {label})")
            pairs.append((f32, label))
        if not pairs:
            raise ValidationError(f"no .f32 score maps in {scores_path}")
        return pairs
    return [(scores_path, labels_path)]


def cmd_eval(args, config: dict) -> int:
    scores_path = Path(args.scores)
    labels_path = Path(args.labels)
    pairs = _eval_pairs(scores_path, labels_path)
    all_scores, all_labels = [], []
    cm_pred, cm_gt = [], []
    for f32, label_png in pairs:
        smap, _ = read_score_map(f32)
        labels = read_label_map(label_png)
        if labels.shape != smap.shape:
            raise ValidationError(
                f"{f32}: score map {smap.shape} does not match labels {labels.shape}"
            )
        keep = labels != IGNORE_ID
        all_scores.append(smap[keep])
        all_labels.append((labels[keep] == OUTLIER_ID).astype(np.int64))
        if args.pred:
            pred_path = Path(args.pred)
            pred_png = pred_path / f"{f32.stem}_pred.png" if pred_path.is_dir() else pred_path
            cm_pred.append(read_label_map(pred_png))
            cm_gt.append(labels)
    report = binary_report(np.concatenate(all_scores), np.concatenate(all_labels))
    if cm_pred:
        value, per_class = miou(
            np.concatenate([p.ravel() for p in cm_pred]),
            np.concatenate([g.ravel() for g in cm_gt]),
            args.num_classes,
        )
        report.miou = value
        report.per_class_iou = per_class
    _dump_json(Path(args.out), report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dirs = [Path(r) for r in args.runs.split(",")]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for run_dir in run_dirs:
        eval_dir = run_dir / "eval"
        if not eval_dir.is_dir():
            raise ValidationError(f"{run_dir}: no eval/ directory")
        for report_file in sorted(eval_dir.glob("*.json")):
            rep = json.loads(report_file.read_text())
            rows.append(
                {
                    "run": run_dir.name,
                    "kind": report_file.stem,
                    "ap": rep["ap"],
                    "fpr_at_95": rep["fpr_at_95"],
                    "auroc": rep["auroc"],
                    "miou": rep.get("miou", ""),
                }
            )
    if not rows:
        raise ValidationError("no eval reports found in the given runs")

    csv_path = out_dir / "report.csv"
    with open(csv_path, "w") as f:
        f.write("run,kind,ap,fpr_at_95,auroc,miou\n")
        for r in rows:
            f.write(f"{r['run']},{r['kind']},{r['ap']},{r['fpr_at_95']},{r['auroc']},{r['miou']}\n")

    # one grouped bar figure per metric, runs on the x axis
    kinds = sorted({r["kind"] for r in rows})
    runs = [d.name for d in run_dirs]
    for metric in ("ap", "auroc", "fpr_at_95"):
        fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(runs)), 3.2))
        width = 0.8 / max(1, len(kinds))
        x = np.arange(len(runs))
        for j, kind in enumerate(kinds):
            vals = []
            for run in runs:
                match = [r[metric] for r in rows if r["run"] == run and r["kind"] == kind]
                vals.append(match[0] if match else np.nan)
            ax.bar(x + j * width, vals, width, label=kind)
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(runs, rotation=15)
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / f"{metric}.png", dpi=120)
        plt.close(fig)

    # grayscale score-map exports
    for run_dir in run_dirs:
        scores_root = run_dir / "scores"
        if not scores_root.is_dir():
            continue
        for f32 in sorted(scores_root.rglob("*.f32")):
            smap, sidecar = read_score_map(f32)
            dest = out_dir / "scoremaps" / run_dir.name / sidecar.get("kind", "unknown")
            dest.mkdir(parents=True, exist_ok=True)
            write_score_png(dest / f"{f32.stem}.png", smap)

    print(f"wrote {csv_path} ({len(rows)} rows) and metric figures")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodseg", description="Dense anomaly detection toolkit"
    )
    parser.add_argument("--config", help="JSON config file; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter-negatives", help="filter a negative catalog")
    p.add_argument("--catalog", required=True)
    p.add_argument("--class-map", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="generate mixed-content samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train-toy", help="train the toy model on shapes world")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preset", default="dh2", choices=["dh", "dh2", "sd"])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)

    p = sub.add_parser("score", help="score images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", default="hybrid", help="comma-separated score kinds")

    p = sub.add_parser("eval", help="evaluate score maps against label maps")
    p.add_argument("--scores", required=True, help=".f32 file or directory of them")
    p.add_argument("--labels", required=True, help="label PNG or directory")
    p.add_argument("--out", required=True, help="output report JSON path")
    p.add_argument("--pred", help="predicted label PNG or directory (enables mIoU)")
    p.add_argument("--num-classes", type=int, default=4)

    p = sub.add_parser("report", help="assemble CSV tables, figures, score-map PNGs")
    p.add_argument("--runs", required=True, help="comma-separated run directories")
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        config = _load_config(args.config)
        if args.command in ("generate", "train-toy") and args.seed is None:
            if "seed" in config:
                args.seed = int(config["seed"])
            else:
                print(
                    f"error: {args.command} requires --seed (or 'seed' in the config file)",
                    file=sys.stderr,
                )
                return 1
        if args.command == "filter-negatives":
            return cmd_filter_negatives(args)
        if args.command == "generate":
            return cmd_generate(args, config)
        if args.command == "train-toy":
            return cmd_train_toy(args, config)
        if args.command == "score":
            return cmd_score(args, config)
        if args.command == "eval":
            return cmd_eval(args, config)
        if args.command == "report":
            return cmd_report(args)
        return 1
    except (ValidationError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
