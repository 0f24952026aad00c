"""Command line pipeline: phantom -> build-data -> train -> predict -> evaluate -> analyze.

One JSON config drives everything; any key can be overridden per
invocation with --set section.key=value. Exit codes: 0 success,
1 internal error, 2 invalid input (single-line reason on stderr).
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .config import config_reference, load_config
from .datasets import build_dataset, load_sample_set, save_sample_set, split_dataset
from .imaging import BinaryMask3D, load_volume, save_volume
from .inference import evaluate_mask, predict_mask
from .longitudinal import (
    TimePointVolume,
    cohort_slope_stats,
    compute_volume,
    fit_timeline,
    plot_subject_timeline,
    write_boxstats_csv,
    write_points_csv,
    write_timelines_csv,
)
from .manifests import read_manifest, resolve_path, write_manifest
from .models import build_model, load_checkpoint
from .nifti import NiftiError
from .postprocess import derive_roi_box
from .synthetic import write_phantom_cohort
from .training import train as run_training

PARTS = ("train", "val", "test")


def _fail(message: str, code: int):
    click.echo(f"hippovol: {'error' if code == 2 else 'internal error'}: {message}", err=True)
    sys.exit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, FileNotFoundError, NiftiError, KeyError, NotADirectoryError) as exc:
            _fail(str(exc), 2)
        except click.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001 - the CLI boundary
            _fail(f"{type(exc).__name__}: {exc}", 1)

    return wrapper


@click.group(epilog="Config keys (override with --set key=value):\n\n" + config_reference())
@click.option("--config", "-c", "config_path", type=click.Path(), default=None,
              help="JSON run configuration (defaults used when omitted).")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config key, e.g. --set model.depth=4")
@click.pass_context
def main(ctx, config_path, overrides):
    """Hippocampus segmentation and longitudinal volumetry pipeline."""
    threads = os.environ.get("HIPPO_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = overrides


def _config(ctx):
    return load_config(ctx.obj["config_path"], ctx.obj["overrides"])


@main.command()
@click.pass_context
@guarded
def phantom(ctx):
    """Generate the synthetic longitudinal cohort (scans, labels, manifest)."""
    cfg = _config(ctx)
    manifest = write_phantom_cohort(cfg.phantom.specs(cfg.seed), cfg.paths.phantom_dir)
    click.echo(str(manifest))


def _load_cohort(manifest_path):
    records = read_manifest(manifest_path)
    pairs = []
    for rec in records:
        scan = load_volume(resolve_path(manifest_path, rec["scan"]),
                           rec["subject_id"], rec["timepoint_years"])
        label = load_volume(resolve_path(manifest_path, rec["label"]),
                            rec["subject_id"], rec["timepoint_years"])
        pairs.append((scan, label))
    return records, pairs


@main.command("build-data")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None,
              help="Cohort manifest (default: <work>/phantom/manifest.json).")
@click.pass_context
@guarded
def build_data(ctx, manifest_path):
    """Slice the cohort into 2D samples and split by subject."""
    cfg = _config(ctx)
    manifest_path = Path(manifest_path or cfg.paths.phantom_dir / "manifest.json")
    records, pairs = _load_cohort(manifest_path)

    sample_set = build_dataset(pairs, cfg.dataset.recipe)
    parts = split_dataset(sample_set, cfg.dataset.split_ratios, cfg.seed)
    out_dir = cfg.paths.data_dir
    for name, part in zip(PARTS, parts):
        save_sample_set(part, out_dir / name)

    train_subjects = set(parts[0].subject_ids())
    roi_box = derive_roi_box(
        [label.data for (scan, label) in pairs if scan.subject_id in train_subjects],
        cfg.postprocess.roi_margin_voxels,
    )
    meta = {
        "source_manifest": str(manifest_path),
        "reference_shape": list(pairs[0][0].data.shape),
        "roi_box": [list(b) for b in roi_box],
        "split": {name: part.subject_ids() for name, part in zip(PARTS, parts)},
        "counts": {name: len(part) for name, part in zip(PARTS, parts)},
    }
    meta_path = out_dir / "meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    click.echo(str(out_dir))


@main.command("train")
@click.pass_context
@guarded
def train_cmd(ctx):
    """Train the configured model on the built dataset."""
    cfg = _config(ctx)
    train_set = load_sample_set(cfg.paths.data_dir / "train")
    val_set = load_sample_set(cfg.paths.data_dir / "val")
    model = build_model(cfg.model, seed=cfg.seed)
    _, reports = run_training(model, train_set, val_set, cfg.train, cfg.paths.train_dir)

    meta_path = cfg.paths.data_dir / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        (cfg.paths.train_dir / "roi.json").write_text(
            json.dumps({"roi_box": meta["roi_box"]}, sort_keys=True)
        )
    best = cfg.paths.train_dir / "best.ckpt"
    click.echo(f"{best} epochs={len(reports)} best_val_loss={min(r.val_loss for r in reports):.6f}")


def _load_roi_box(cfg):
    if cfg.postprocess.roi_margin_voxels <= 0:
        return None
    roi_path = cfg.paths.train_dir / "roi.json"
    if not roi_path.exists():
        return None
    box = json.loads(roi_path.read_text())["roi_box"]
    return tuple((int(lo), int(hi)) for lo, hi in box)


@main.command()
@click.option("--checkpoint", type=click.Path(), default=None,
              help="Model checkpoint (default: <work>/train/best.ckpt).")
@click.option("--scan", "scan_path", type=click.Path(), default=None, help="Single scan to segment.")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Output mask for --scan.")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None,
              help="Cohort manifest; every record's scan is segmented.")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Output directory for --manifest mode (default: <work>/predictions).")
@click.pass_context
@guarded
def predict(ctx, checkpoint, scan_path, out_path, manifest_path, out_dir):
    """Segment scans into 3D NIfTI masks (slice, forward, post-process, reassemble)."""
    cfg = _config(ctx)
    if (scan_path is None) == (manifest_path is None):
        raise ValueError("pass exactly one of --scan or --manifest")
    model = load_checkpoint(Path(checkpoint or cfg.paths.train_dir / "best.ckpt"))
    roi_box = _load_roi_box(cfg)

    if scan_path:
        grid = load_volume(scan_path)
        mask = predict_mask(model, grid, cfg.dataset.recipe, cfg.postprocess,
                            roi_box=roi_box, batch_size=cfg.train.batch_size)
        out_path = Path(out_path or Path(scan_path).name.replace(".nii", "_pred.nii"))
        save_volume(mask, out_path)
        click.echo(str(out_path))
        return

    records = read_manifest(manifest_path)
    out_dir = Path(out_dir or cfg.paths.predictions_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_records = []
    for rec in records:
        grid = load_volume(resolve_path(manifest_path, rec["scan"]),
                           rec["subject_id"], rec["timepoint_years"])
        mask = predict_mask(model, grid, cfg.dataset.recipe, cfg.postprocess,
                            roi_box=roi_box, batch_size=cfg.train.batch_size)
        name = f"{rec['subject_id']}_t{int(rec['timepoint_years']):02d}_pred.nii.gz"
        save_volume(mask, out_dir / name)
        out_records.append({**{k: rec[k] for k in ("subject_id", "timepoint_years")},
                            "status": rec.get("status", "unknown"), "mask": name})
    manifest = write_manifest(out_records, out_dir / "manifest.json")
    click.echo(str(manifest))


def _load_mask(manifest_path, rec, key):
    if key not in rec:
        raise ValueError(
            f"manifest record for {rec['subject_id']!r} at t={rec['timepoint_years']} "
            f"has no {key!r} path"
        )
    path = resolve_path(manifest_path, rec[key])
    grid = load_volume(path, rec["subject_id"], rec["timepoint_years"])
    return BinaryMask3D(grid.data, grid.spacing, rec["subject_id"], rec["timepoint_years"])


@main.command()
@click.option("--pred-manifest", type=click.Path(), default=None,
              help="Predictions manifest (default: <work>/predictions/manifest.json).")
@click.option("--truth-manifest", type=click.Path(), default=None,
              help="Ground-truth manifest (default: <work>/phantom/manifest.json).")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Metrics CSV (default: <work>/metrics.csv).")
@click.pass_context
@guarded
def evaluate(ctx, pred_manifest, truth_manifest, out_path):
    """Per-volume Dice / IoU / slice Dice / continuity against ground truth."""
    cfg = _config(ctx)
    pred_manifest = Path(pred_manifest or cfg.paths.predictions_dir / "manifest.json")
    truth_manifest = Path(truth_manifest or cfg.paths.phantom_dir / "manifest.json")
    preds = read_manifest(pred_manifest)
    truths = {(r["subject_id"], r["timepoint_years"]): r for r in read_manifest(truth_manifest)}

    rows = []
    for rec in preds:
        key = (rec["subject_id"], rec["timepoint_years"])
        if key not in truths:
            raise ValueError(f"no ground-truth record for subject {key[0]!r} at t={key[1]}")
        pred = _load_mask(pred_manifest, rec, "mask")
        truth = _load_mask(truth_manifest, truths[key], "label")
        metrics = evaluate_mask(pred, truth, axis=cfg.dataset.recipe.axis)
        rows.append((rec["subject_id"], rec["timepoint_years"], metrics))

    out_path = Path(out_path or cfg.paths.metrics_csv)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject", "timepoint", "dice_volume", "dice_slice_mean",
                         "iou_volume", "continuity"])
        for subject, t, m in rows:
            writer.writerow([subject, f"{t:.6f}", f"{m['dice_volume']:.6f}",
                             f"{m['dice_slice_mean']:.6f}", f"{m['iou_volume']:.6f}",
                             f"{m['continuity']:.6f}"])
    mean_dice = float(np.mean([m["dice_volume"] for _, _, m in rows]))
    click.echo(f"{out_path} volumes={len(rows)} mean_dice_volume={mean_dice:.4f}")


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(), default=None,
              help="Mask manifest; records use 'mask' (predictions) or 'label' (ground truth).")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Analysis output directory (default: <work>/analysis).")
@click.pass_context
@guarded
def analyze(ctx, manifest_path, out_dir):
    """Fit per-subject volume trajectories; write CSV reports and SVG plots."""
    cfg = _config(ctx)
    manifest_path = Path(manifest_path or cfg.paths.predictions_dir / "manifest.json")
    records = read_manifest(manifest_path)
    out_dir = Path(out_dir or cfg.paths.analysis_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_subject = {}
    for rec in records:
        if "mask" not in rec and "label" not in rec:
            raise ValueError(
                f"manifest record for {rec['subject_id']!r} at t={rec['timepoint_years']} "
                f"has neither a 'mask' nor a 'label' path"
            )
        key = "mask" if "mask" in rec else "label"
        source = "predicted" if key == "mask" else "ground_truth"
        mask = _load_mask(manifest_path, rec, key)
        point = TimePointVolume(rec["subject_id"], rec["timepoint_years"],
                                compute_volume(mask), source)
        by_subject.setdefault((rec["subject_id"], rec.get("status", "unknown")), []).append(point)

    points, analyses = [], []
    for (subject, status), subject_points in sorted(by_subject.items()):
        analysis = fit_timeline(subject_points, status)
        analyses.append(analysis)
        points.extend(sorted(subject_points, key=lambda p: p.timepoint_years))
        plot_subject_timeline(subject_points, analysis, out_dir / "plots" / f"{subject}.svg")

    write_points_csv(points, out_dir / "points.csv")
    write_timelines_csv(analyses, out_dir / "timelines.csv")
    write_boxstats_csv(cohort_slope_stats(analyses), out_dir / "boxstats.csv")
    click.echo(str(out_dir / "timelines.csv"))


if __name__ == "__main__":
    main()
