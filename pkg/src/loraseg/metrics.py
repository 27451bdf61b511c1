"""Dice / IoU on binarized masks with per-image and per-fold aggregation.

Convention: when prediction and ground truth are both empty, both metrics
are 1.0 (a correct empty prediction is perfect).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError


def _validate_pair(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    for arr, label in ((pred, "prediction"), (truth, "ground truth")):
        if not np.isin(arr, (0, 1)).all():
            raise ShapeError(f"{label} mask is not binary")
    return pred.astype(bool), truth.astype(bool)


def dice(pred, truth) -> float:
    pred, truth = _validate_pair(pred, truth)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & truth).sum()) / total


def iou(pred, truth) -> float:
    pred, truth = _validate_pair(pred, truth)
    union = int((pred | truth).sum())
    if union == 0:
        return 1.0
    return int((pred & truth).sum()) / union


@dataclass
class MetricsRow:
    sample_id: str
    dice: float
    iou: float


@dataclass
class MetricsReport:
    rows: list
    mean_dice: float
    mean_iou: float
    fold_means: dict = field(default_factory=dict)  # fold -> (dice, iou)
    fold_mean_dice: float | None = None  # unweighted mean over folds
    fold_mean_iou: float | None = None


def aggregate(rows, fold_of=None) -> MetricsReport:
    """Arithmetic means over per-image rows; optional per-fold breakdown.

    `fold_of` maps sample_id -> fold tag. The overall fold means are the
    unweighted means of the per-fold means.
    """
    rows = list(rows)
    if not rows:
        raise DataError("cannot aggregate an empty set of metric rows")
    mean_dice = sum(r.dice for r in rows) / len(rows)
    mean_iou = sum(r.iou for r in rows) / len(rows)
    report = MetricsReport(rows=rows, mean_dice=mean_dice, mean_iou=mean_iou)
    if fold_of:
        by_fold = {}
        for r in rows:
            by_fold.setdefault(fold_of[r.sample_id], []).append(r)
        for fold in sorted(by_fold):
            members = by_fold[fold]
            report.fold_means[fold] = (
                sum(r.dice for r in members) / len(members),
                sum(r.iou for r in members) / len(members),
            )
        report.fold_mean_dice = sum(d for d, _ in report.fold_means.values()) / len(
            report.fold_means
        )
        report.fold_mean_iou = sum(i for _, i in report.fold_means.values()) / len(
            report.fold_means
        )
    return report


def write_report_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "dice", "iou"])
        for r in report.rows:
            writer.writerow([r.sample_id, f"{r.dice:.6f}", f"{r.iou:.6f}"])


def markdown_table(headers, rows) -> str:
    """GitHub-style table; cells are stringified as-is."""
    lines = ["| " + " | ".join(str(h) for h in headers) + " |"]
    lines.append("|" + "|".join(" --- " for _ in headers) + "|")
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines) + "\n"


def report_markdown(title, report) -> str:
    rows = [[title, f"{report.mean_dice:.4f}", f"{report.mean_iou:.4f}", len(report.rows)]]
    text = markdown_table(["dataset", "dice", "iou", "images"], rows)
    if report.fold_means:
        fold_rows = [
            [fold, f"{d:.4f}", f"{i:.4f}"] for fold, (d, i) in sorted(report.fold_means.items())
        ]
        fold_rows.append(
            ["mean", f"{report.fold_mean_dice:.4f}", f"{report.fold_mean_iou:.4f}"]
        )
        text += "\n" + markdown_table(["fold", "dice", "iou"], fold_rows)
    return text
