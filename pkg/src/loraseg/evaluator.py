"""Evaluation harnesses: in-domain, cross-dataset transfer, ablations, overlays.

Full images are segmented by tiled inference: mirror-pad to whole tiles,
run the network per tile (stride = tile size), stitch probabilities, crop
back to the original extent, threshold at 0.5.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import metrics
from .config import apply_overrides, config_from_dict
from .data import (
    DatasetManifest,
    load_image,
    load_manifest,
    load_mask,
    normalize_image,
    pad_to_cover,
    tile_origins,
)
from .errors import ConfigError, DataError
from .trainer import load_checkpoint, train

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("full", "no_lora", "no_bias_prior", "single_level", "dual_level")
THRESHOLD = 0.5


@dataclass
class EvalJob:
    checkpoint: str
    manifest: str  # path to a manifest file, or a DatasetManifest
    out_dir: str
    split: str = "test"
    batch_size: int = 4
    overlays: int = 0
    use_full: bool = False  # evaluate on every sample instead of one split


@dataclass
class TransferMatrix:
    datasets: list
    cells: dict = field(default_factory=dict)  # (source, target) -> (dice, iou)


def _resolve_manifest(manifest):
    if isinstance(manifest, DatasetManifest):
        return manifest
    return load_manifest(manifest)


def predict_probabilities(model, image, mean, std, tile, batch_size=4, device="cpu"):
    """Probability map (H, W) float32 for an RGB uint8 image of any size."""
    h, w = image.shape[:2]
    padded = pad_to_cover(image, tile, tile)
    canvas = np.zeros(padded.shape[:2], dtype=np.float32)
    origins = tile_origins(padded.shape[0], padded.shape[1], tile, tile)
    model.eval()
    with torch.no_grad():
        for i in range(0, len(origins), batch_size):
            chunk = origins[i : i + batch_size]
            batch = torch.stack(
                [
                    normalize_image(padded[r : r + tile, c : c + tile], mean, std)
                    for r, c in chunk
                ]
            )
            probs = model(batch.to(device)).cpu().numpy()
            for (r, c), prob in zip(chunk, probs):
                canvas[r : r + tile, c : c + tile] = prob[0]
    return canvas[:h, :w]


def _eval_samples(job, manifest):
    samples = manifest.samples if job.use_full else manifest.of_split(job.split)
    if not samples:
        raise DataError(
            f"no samples to evaluate (split '{job.split}', dataset '{manifest.name}')"
        )
    return samples


def evaluate(job: EvalJob) -> metrics.MetricsReport:
    """Tiled full-image evaluation of one checkpoint on one dataset."""
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, archive = load_checkpoint(job.checkpoint)
    config = config_from_dict(archive.meta["config"])
    manifest = _resolve_manifest(job.manifest)
    samples = _eval_samples(job, manifest)

    mean, std = config.backbone.pixel_mean, config.backbone.pixel_std
    tile = config.backbone.image_size
    rows = []
    for sample in samples:
        image = load_image(manifest.image_path(sample))
        truth = load_mask(manifest.mask_path(sample))
        prob = predict_probabilities(model, image, mean, std, tile, job.batch_size)
        pred = (prob >= THRESHOLD).astype(np.uint8)
        rows.append(
            metrics.MetricsRow(
                sample_id=sample.sample_id,
                dice=metrics.dice(pred, truth),
                iou=metrics.iou(pred, truth),
            )
        )

    fold_of = None
    if any(s.tag for s in samples):
        fold_of = {s.sample_id: s.tag for s in samples}
    report = metrics.aggregate(rows, fold_of=fold_of)

    metrics.write_report_csv(report, out_dir / "report.csv")
    (out_dir / "report.md").write_text(
        metrics.report_markdown(manifest.name, report), encoding="utf-8"
    )
    summary = {
        "dataset": manifest.name,
        "split": "all" if job.use_full else job.split,
        "checkpoint": str(job.checkpoint),
        "images": len(report.rows),
        "mean_dice": report.mean_dice,
        "mean_iou": report.mean_iou,
    }
    if report.fold_means:
        summary["fold_means"] = {k: list(v) for k, v in report.fold_means.items()}
        summary["fold_mean_dice"] = report.fold_mean_dice
        summary["fold_mean_iou"] = report.fold_mean_iou
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)

    if job.overlays:
        export_overlays(job, job.overlays, model=model, config=config, manifest=manifest)
    return report


def export_overlays(job, n_samples, model=None, config=None, manifest=None):
    """Input / ground-truth / prediction triptych PNGs for sampled test images.

    Prediction panels carry the thresholded mask verbatim (0/255, no
    smoothing). Returns the written paths.
    """
    if n_samples <= 0:
        return []
    if model is None:
        model, archive = load_checkpoint(job.checkpoint)
        config = config_from_dict(archive.meta["config"])
    manifest = _resolve_manifest(manifest if manifest is not None else job.manifest)
    samples = _eval_samples(job, manifest)
    samples = sorted(samples, key=lambda s: s.sample_id)[:n_samples]

    overlay_dir = Path(job.out_dir) / "overlays"
    overlay_dir.mkdir(parents=True, exist_ok=True)
    mean, std = config.backbone.pixel_mean, config.backbone.pixel_std
    tile = config.backbone.image_size
    written = []
    for sample in samples:
        image = load_image(manifest.image_path(sample))
        truth = load_mask(manifest.mask_path(sample))
        prob = predict_probabilities(model, image, mean, std, tile, job.batch_size)
        pred = (prob >= THRESHOLD).astype(np.uint8)
        panels = [
            image,
            np.repeat(truth[:, :, None] * 255, 3, axis=2).astype(np.uint8),
            np.repeat(pred[:, :, None] * 255, 3, axis=2).astype(np.uint8),
        ]
        triptych = np.concatenate(panels, axis=1)
        path = overlay_dir / f"{sample.sample_id.replace('/', '_')}.png"
        Image.fromarray(triptych).save(path)
        written.append(path)
    return written


def cross_eval(checkpoints, manifests, out_dir, split="test", use_full=False) -> TransferMatrix:
    """Evaluate every (source checkpoint, target dataset) pair.

    `checkpoints` maps dataset name -> checkpoint path; `manifests` maps
    dataset name -> manifest path. The diagonal is the in-domain result.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = sorted(manifests)
    missing = [name for name in datasets if name not in checkpoints]
    if missing:
        raise DataError(f"missing checkpoints for datasets: {missing}")

    matrix = TransferMatrix(datasets=datasets)
    for source in datasets:
        for target in datasets:
            job = EvalJob(
                checkpoint=checkpoints[source],
                manifest=manifests[target],
                out_dir=out_dir / f"{source}__to__{target}",
                split=split,
                use_full=use_full,
            )
            report = evaluate(job)
            matrix.cells[(source, target)] = (report.mean_dice, report.mean_iou)
            log.info(
                "transfer %s -> %s: dice %.4f iou %.4f",
                source, target, report.mean_dice, report.mean_iou,
            )

    write_transfer_csv(matrix, out_dir / "transfer.csv")
    (out_dir / "transfer.md").write_text(transfer_markdown(matrix), encoding="utf-8")
    return matrix


def write_transfer_csv(matrix, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["source", "target", "dice", "iou"])
        for source in matrix.datasets:
            for target in matrix.datasets:
                d, i = matrix.cells[(source, target)]
                writer.writerow([source, target, f"{d:.6f}", f"{i:.6f}"])


def load_transfer_csv(path) -> TransferMatrix:
    cells = {}
    names = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["source"] not in names:
                names.append(row["source"])
            cells[(row["source"], row["target"])] = (float(row["dice"]), float(row["iou"]))
    return TransferMatrix(datasets=names, cells=cells)


def transfer_markdown(matrix) -> str:
    headers = ["train \\ test"] + [f"{d} Dice/IoU" for d in matrix.datasets]
    rows = []
    for source in matrix.datasets:
        row = [source]
        for target in matrix.datasets:
            d, i = matrix.cells[(source, target)]
            row.append(f"{d:.4f}/{i:.4f}")
        rows.append(row)
    return metrics.markdown_table(headers, rows)


def derive_variant(config, variant):
    """Pure ablation-config derivation; never mutates the base config."""
    if variant == "full":
        return apply_overrides(config, [])
    if variant == "no_lora":
        return apply_overrides(config, [("lora.enabled", False)])
    if variant == "no_bias_prior":
        return apply_overrides(config, [("decoder.use_bias_prior", False)])
    depth = config.backbone.depth
    if variant == "single_level":
        return apply_overrides(config, [("backbone.tap_indices", [depth])])
    if variant == "dual_level":
        if depth - 2 < 1:
            raise ConfigError(f"dual_level variant needs depth >= 3, got {depth}")
        return apply_overrides(config, [("backbone.tap_indices", [depth - 2, depth])])
    raise ConfigError(f"unknown ablation variant '{variant}' (choose from {ABLATION_VARIANTS})")


def run_ablation(config, out_dir, variants=None, device="cpu"):
    """Train + evaluate every ablation variant; emit a Table-3-shaped report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = list(variants) if variants else list(ABLATION_VARIANTS)
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant '{v}'")

    reports = {}
    for variant in variants:
        cfg = derive_variant(config, variant)
        run_dir = out_dir / variant
        result = train(cfg, run_dir / "train", device=device)
        job = EvalJob(
            checkpoint=str(result.best_checkpoint),
            manifest=_ablation_manifest_path(cfg),
            out_dir=run_dir / "eval",
        )
        reports[variant] = evaluate(job)
        log.info("ablation %s: dice %.4f", variant, reports[variant].mean_dice)

    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "dice", "iou", "images"])
        for variant in variants:
            r = reports[variant]
            writer.writerow([variant, f"{r.mean_dice:.6f}", f"{r.mean_iou:.6f}", len(r.rows)])
    rows = [
        [variant, f"{reports[variant].mean_dice:.4f}", f"{reports[variant].mean_iou:.4f}"]
        for variant in variants
    ]
    (out_dir / "ablation.md").write_text(
        metrics.markdown_table(["variant", "dice", "iou"], rows), encoding="utf-8"
    )
    return reports


def _ablation_manifest_path(config):
    if config.data.manifest:
        return config.data.manifest
    if config.data.root:
        return str(Path(config.data.root) / "manifest.yaml")
    raise DataError("ablation needs config.data.manifest or a root containing manifest.yaml")


def build_benchmark(entries, out_dir):
    """Combine evaluation summaries into benchmark.{md,csv}.

    `entries` is a list of (label, summary_json_path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = []
    for label, path in entries:
        with open(path, "r", encoding="utf-8") as f:
            loaded.append((label, json.load(f)))
    with open(out_dir / "benchmark.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "dataset", "dice", "iou", "images"])
        for label, summary in loaded:
            writer.writerow(
                [
                    label,
                    summary["dataset"],
                    f"{summary['mean_dice']:.6f}",
                    f"{summary['mean_iou']:.6f}",
                    summary["images"],
                ]
            )
    rows = [
        [label, s["dataset"], f"{s['mean_dice']:.4f}", f"{s['mean_iou']:.4f}"]
        for label, s in loaded
    ]
    (out_dir / "benchmark.md").write_text(
        metrics.markdown_table(["model", "dataset", "dice", "iou"], rows), encoding="utf-8"
    )
    return out_dir / "benchmark.md"
