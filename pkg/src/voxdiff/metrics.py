"""Intersection-over-union evaluation with mask restriction and diversity.

Per-class IoU counts intersections and unions inside an optional voxel mask.
The mean IoU excludes FREE space by default and skips classes whose union is
empty.  Dataset-level numbers pool the raw counts across scenes before the
final division, so scenes where a class is absent do not dilute it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grids import FREE, VisibilityMask
from .io import write_json
from .validation import check_num_classes, check_same_shape

__all__ = [
    "MetricsReport",
    "IoUAccumulator",
    "miou_report",
    "masked_regions",
    "masked_suite",
    "visibility_probability",
    "DiversitySummary",
    "sample_diversity",
    "save_reports",
]

DEFAULT_VIS_THRESHOLDS = (0.05, 0.10, 0.20, 0.50)
DEFAULT_DISTANCE_FRAC = 0.6


@dataclass
class MetricsReport:
    """Per-class IoU plus their mean; NaN marks classes with an empty union."""

    num_classes: int
    per_class: np.ndarray
    miou: float
    voxels: int
    include_free: bool = False
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "per_class": [None if math.isnan(v) else float(v) for v in self.per_class],
            "miou": None if math.isnan(self.miou) else float(self.miou),
            "voxels": int(self.voxels),
            "include_free": self.include_free,
            "metadata": self.metadata,
        }


class IoUAccumulator:
    """Streaming per-class intersection/union counts, poolable across scenes."""

    def __init__(self, num_classes: int, include_free: bool = False):
        self.num_classes = check_num_classes(num_classes)
        self.include_free = bool(include_free)
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.voxels = 0

    def update(self, pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        check_same_shape(pred, gt, "pred", "gt")
        if mask is not None:
            mask = np.asarray(mask).astype(bool)
            check_same_shape(mask, gt, "mask", "gt")
            pred = pred[mask]
            gt = gt[mask]
        if pred.size and (pred.max() >= self.num_classes or gt.max() >= self.num_classes):
            raise ValueError("labels exceed num_classes")
        self.voxels += pred.size
        K = self.num_classes
        inter = np.bincount(pred[pred == gt].ravel(), minlength=K)[:K]
        pred_counts = np.bincount(pred.ravel(), minlength=K)[:K]
        gt_counts = np.bincount(gt.ravel(), minlength=K)[:K]
        self.intersection += inter
        self.union += pred_counts + gt_counts - inter

    def result(self, metadata: dict | None = None) -> MetricsReport:
        with np.errstate(invalid="ignore"):
            per_class = np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)
        start = 0 if self.include_free else 1
        valid = per_class[start:]
        valid = valid[~np.isnan(valid)]
        miou = float(valid.mean()) if valid.size else float("nan")
        return MetricsReport(self.num_classes, per_class, miou, self.voxels,
                             self.include_free, metadata or {})


def miou_report(pred, gt, num_classes: int, mask: np.ndarray | None = None,
                include_free: bool = False) -> MetricsReport:
    """Single-scene convenience wrapper around IoUAccumulator."""
    pred = pred.labels if hasattr(pred, "labels") else pred
    gt = gt.labels if hasattr(gt, "labels") else gt
    acc = IoUAccumulator(num_classes, include_free)
    acc.update(pred, gt, mask)
    return acc.result()


def masked_regions(visibility: VisibilityMask, sensor: tuple[int, int, int], *,
                   vis_prob: np.ndarray | None = None,
                   vis_thresholds: tuple[float, ...] | None = None,
                   distance_frac: float = DEFAULT_DISTANCE_FRAC) -> dict[str, np.ndarray]:
    """Named boolean evaluation regions for one scene.

    Always includes "invisible" (occluded or out-of-range voxels) and
    "distant" (beyond distance_frac of the largest in-grid distance from the
    sensor).  When a visibility-probability field is given, adds one region
    per threshold containing voxels observed in fewer than that fraction of
    scenes; asking for thresholds without a field is an error.
    """
    flags = visibility.flags
    dims = flags.shape
    regions = {"invisible": flags == 0}
    idx = np.indices(dims, dtype=np.float64)
    dist = np.sqrt(((idx - np.asarray(sensor, dtype=np.float64)[:, None, None, None]) ** 2).sum(axis=0))
    regions["distant"] = dist > distance_frac * dist.max()
    if vis_prob is None:
        if vis_thresholds:
            raise ValueError("visibility thresholds given without a visibility-probability field")
        return regions
    vis_prob = np.asarray(vis_prob, dtype=np.float64)
    check_same_shape(vis_prob, flags, "vis_prob", "visibility")
    if vis_thresholds is None:
        vis_thresholds = DEFAULT_VIS_THRESHOLDS
    for thr in vis_thresholds:
        regions[f"visprob_lt_{int(round(thr * 100))}"] = vis_prob < thr
    return regions


def masked_suite(pred, gt, visibility: VisibilityMask, sensor: tuple[int, int, int],
                 num_classes: int, *, vis_prob: np.ndarray | None = None,
                 vis_thresholds: tuple[float, ...] | None = None,
                 distance_frac: float = DEFAULT_DISTANCE_FRAC,
                 include_free: bool = False) -> dict[str, MetricsReport]:
    """IoU reports over the standard evaluation regions of a single scene."""
    pred = pred.labels if hasattr(pred, "labels") else pred
    gt = gt.labels if hasattr(gt, "labels") else gt
    regions = masked_regions(visibility, sensor, vis_prob=vis_prob,
                             vis_thresholds=vis_thresholds, distance_frac=distance_frac)
    out = {"all": miou_report(pred, gt, num_classes, None, include_free)}
    for name, region in regions.items():
        out[name] = miou_report(pred, gt, num_classes, region, include_free)
    return out


def visibility_probability(masks) -> np.ndarray:
    """Per-voxel fraction of scenes in which the voxel was observed."""
    total = None
    count = 0
    for mask in masks:
        flags = mask.flags if isinstance(mask, VisibilityMask) else np.asarray(mask)
        if total is None:
            total = np.zeros(flags.shape, dtype=np.float64)
        elif flags.shape != total.shape:
            raise ValueError("visibility masks disagree on grid dims")
        total += flags
        count += 1
    if count == 0:
        raise ValueError("need at least one visibility mask")
    return total / count


@dataclass
class DiversitySummary:
    """Per-voxel label entropy (nats) over repeated samples, split by visibility."""

    mean_visible: float
    mean_invisible: float
    mean: float
    max: float

    def to_dict(self) -> dict:
        return {"mean_visible": self.mean_visible, "mean_invisible": self.mean_invisible,
                "mean": self.mean, "max": self.max}


def sample_diversity(samples, visibility: VisibilityMask, num_classes: int) -> DiversitySummary:
    """Entropy of the empirical per-voxel label distribution over samples."""
    stack = np.stack([s.labels if hasattr(s, "labels") else np.asarray(s) for s in samples])
    if stack.shape[0] < 2:
        raise ValueError("need at least two samples to measure diversity")
    S = stack.shape[0]
    probs = np.stack([(stack == c).sum(axis=0) for c in range(num_classes)]) / S
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -(probs * np.where(probs > 0, np.log(probs), 0.0)).sum(axis=0)
    vis = visibility.flags.astype(bool)
    mean_vis = float(ent[vis].mean()) if vis.any() else float("nan")
    mean_invis = float(ent[~vis].mean()) if (~vis).any() else float("nan")
    return DiversitySummary(mean_vis, mean_invis, float(ent.mean()), float(ent.max()))


def save_reports(reports: dict[str, MetricsReport], out_base: str | Path) -> None:
    """Write a report set as {base}.json and flat {base}.csv (one row per class per mask)."""
    out_base = Path(out_base)
    write_json(out_base.with_suffix(".json"), {name: r.to_dict() for name, r in reports.items()})
    with open(out_base.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mask", "class", "iou"])
        for name in sorted(reports):
            report = reports[name]
            for c in range(report.num_classes):
                v = report.per_class[c]
                writer.writerow([name, c, "" if math.isnan(v) else f"{v:.6f}"])
            writer.writerow([name, "miou", "" if math.isnan(report.miou) else f"{report.miou:.6f}"])
