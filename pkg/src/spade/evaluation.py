"""Metrics: ROCAUC (rank statistic, tie-correct) and the PRO curve
integrated over false-positive rates up to a limit.

PRO treats every connected ground-truth region as one unit: at a given
threshold it is the mean, over all regions pooled across images, of the
fraction of the region's pixels flagged. The reported score is the
trapezoidal integral of PRO over FPR in [0, fpr_limit] divided by
fpr_limit, with the curve linearly interpolated to hit the limit exactly.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatchError, UndefinedMetricError
from .types import AnomalyMap, GroundTruthMask

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class EvalReport:
    image_rocauc: float
    pixel_rocauc: float
    pro_score: float
    sweep: tuple[tuple[float, float, float, float], ...]  # (threshold, fpr, pro, tpr)

    def __post_init__(self) -> None:
        for value, name in (
            (self.image_rocauc, "image_rocauc"),
            (self.pixel_rocauc, "pixel_rocauc"),
            (self.pro_score, "pro_score"),
        ):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        thresholds = [s[0] for s in self.sweep]
        if any(b > a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("sweep must be sorted by descending threshold")
        fprs = [s[1] for s in self.sweep]
        if any(b < a for a, b in zip(fprs, fprs[1:])):
            raise ValueError("sweep FPR must be nondecreasing")

    def to_dict(self) -> dict:
        return {
            "image_rocauc": self.image_rocauc,
            "pixel_rocauc": self.pixel_rocauc,
            "pro_score": self.pro_score,
            "sweep": [list(s) for s in self.sweep],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(
            image_rocauc=raw["image_rocauc"],
            pixel_rocauc=raw["pixel_rocauc"],
            pro_score=raw["pro_score"],
            sweep=tuple(tuple(s) for s in raw["sweep"]),
        )

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def save_sweep_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "pro", "tpr"])
            writer.writerows(self.sweep)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie) over all positive/negative
    pairs, computed exactly via tie-averaged ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeMismatchError(f"scores {scores.shape} vs labels {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROCAUC needs both classes present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    avg_ranks = (starts + ends) / 2.0
    ranks = avg_ranks[inverse]
    pos_rank_sum = ranks[pos].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def connected_components(mask: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """8-connected regions of a binary mask as (rows, cols) pixel arrays,
    ordered by each region's first pixel in row-major scan order."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ShapeMismatchError("mask values must be 0 or 1")
    labeled, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    regions = []
    for label in range(1, n + 1):
        rows, cols = np.nonzero(labeled == label)
        regions.append((rows, cols))
    regions.sort(key=lambda rc: (int(rc[0][0]), int(rc[1][0])))
    return regions


def _aligned_pairs(
    maps: Sequence[AnomalyMap], masks: Sequence[GroundTruthMask]
) -> list[tuple[AnomalyMap, GroundTruthMask]]:
    if len(maps) != len(masks) or not maps:
        raise ShapeMismatchError(f"{len(maps)} maps vs {len(masks)} masks")
    by_id = {m.image_id: m for m in masks}
    if len(by_id) != len(masks):
        raise ShapeMismatchError("duplicate image ids among masks")
    pairs = []
    for amap in maps:
        mask = by_id.get(amap.image_id)
        if mask is None:
            raise ShapeMismatchError(f"no mask for image {amap.image_id!r}")
        if mask.data.shape != amap.scores.shape:
            raise ShapeMismatchError(
                f"{amap.image_id!r}: map {amap.scores.shape} vs mask {mask.data.shape}"
            )
        pairs.append((amap, mask))
    return pairs


def pro_at_threshold(
    maps: Sequence[AnomalyMap], masks: Sequence[GroundTruthMask], t: float
) -> tuple[float, float]:
    """(FPR, PRO) of flagging scores strictly above t, over the whole set."""
    pairs = _aligned_pairs(maps, masks)
    flagged_normal = 0
    total_normal = 0
    coverages = []
    for amap, mask in pairs:
        flagged = amap.scores > t
        normal = mask.data == 0
        flagged_normal += int(np.count_nonzero(flagged & normal))
        total_normal += int(np.count_nonzero(normal))
        for rows, cols in connected_components(mask.data):
            coverages.append(np.count_nonzero(flagged[rows, cols]) / rows.size)
    if not coverages:
        raise UndefinedMetricError("no anomalous region in the entire dataset")
    if total_normal == 0:
        raise UndefinedMetricError("no normal pixels in the entire dataset")
    return flagged_normal / total_normal, float(np.mean(coverages))


def pro_curve(
    maps: Sequence[AnomalyMap],
    masks: Sequence[GroundTruthMask],
    fpr_limit: float = 0.3,
    n_thresholds: int = 200,
) -> tuple[float, tuple[tuple[float, float, float, float], ...]]:
    """PRO integrated over FPR in [0, fpr_limit], normalized by the limit.

    Thresholds are quantiles of the pooled scores plus the exact extremes
    and a sentinel just below the minimum (so the sweep reaches FPR 1).
    """
    pairs = _aligned_pairs(maps, masks)
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")

    normal_scores = []
    anomalous_scores = []
    region_scores = []
    for amap, mask in pairs:
        normal = mask.data == 0
        normal_scores.append(amap.scores[normal])
        anomalous_scores.append(amap.scores[~normal])
        for rows, cols in connected_components(mask.data):
            region_scores.append(np.sort(amap.scores[rows, cols]))
    if not region_scores:
        raise UndefinedMetricError("no anomalous region in the entire dataset")
    normal_sorted = np.sort(np.concatenate(normal_scores))
    anomalous_sorted = np.sort(np.concatenate(anomalous_scores))
    if normal_sorted.size == 0:
        raise UndefinedMetricError("no normal pixels in the entire dataset")

    pooled_min = min(normal_sorted[0], anomalous_sorted[0])
    pooled_max = max(normal_sorted[-1], anomalous_sorted[-1])
    if pooled_min == pooled_max:
        # A constant map carries no ranking: the only operating point flags
        # everything (FPR 1, PRO 1). Pinned as pro_score 1.0, with a warning.
        warnings.warn("constant score map: PRO curve degenerates to a single point", RuntimeWarning)
        sweep = ((float(pooled_min), 1.0, 1.0, 1.0),)
        return 1.0, sweep

    pooled = np.concatenate([normal_sorted, anomalous_sorted])
    qs = np.quantile(pooled, np.linspace(0.0, 1.0, n_thresholds))
    thresholds = np.unique(np.concatenate([qs, [pooled_min, pooled_max]]))[::-1]
    thresholds = np.append(thresholds, np.nextafter(pooled_min, -np.inf))

    def count_above(sorted_arr: np.ndarray, ts: np.ndarray) -> np.ndarray:
        return sorted_arr.size - np.searchsorted(sorted_arr, ts, side="right")

    fpr = count_above(normal_sorted, thresholds) / normal_sorted.size
    tpr = (
        count_above(anomalous_sorted, thresholds) / anomalous_sorted.size
        if anomalous_sorted.size
        else np.zeros_like(thresholds)
    )
    pro = np.zeros_like(thresholds)
    for region in region_scores:
        pro += count_above(region, thresholds) / region.size
    pro /= len(region_scores)

    sweep = tuple(
        (float(t), float(f), float(p), float(tp))
        for t, f, p, tp in zip(thresholds, fpr, pro, tpr)
    )

    xs = fpr
    ys = pro
    inside = xs <= fpr_limit
    x_clip = xs[inside]
    y_clip = ys[inside]
    if x_clip.size == 0 or x_clip[-1] < fpr_limit:
        # Interpolate the curve to hit fpr_limit exactly.
        right = int(np.searchsorted(xs, fpr_limit, side="left"))
        if right >= xs.size:
            raise UndefinedMetricError(f"curve never reaches FPR {fpr_limit}")
        if right == 0:
            y_at = ys[0]
        else:
            x0, x1 = xs[right - 1], xs[right]
            y0, y1 = ys[right - 1], ys[right]
            y_at = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
        x_clip = np.append(x_clip, fpr_limit)
        y_clip = np.append(y_clip, y_at)
    integral = float(np.trapezoid(y_clip, x_clip))
    return integral / fpr_limit, sweep


def evaluate(
    maps: Sequence[AnomalyMap],
    masks: Sequence[GroundTruthMask],
    image_labels: Sequence[int],
    fpr_limit: float = 0.3,
    n_thresholds: int = 200,
) -> EvalReport:
    """Aggregate image ROCAUC, pooled pixel ROCAUC, and the PRO score."""
    if len(image_labels) != len(maps):
        raise ShapeMismatchError(f"{len(image_labels)} labels for {len(maps)} maps")
    pairs = _aligned_pairs(maps, masks)
    image_auc = roc_auc([m.image_score for m in maps], list(image_labels))
    pixel_scores = np.concatenate([amap.scores.ravel() for amap, _ in pairs])
    pixel_labels = np.concatenate([mask.data.ravel() for _, mask in pairs])
    pixel_auc = roc_auc(pixel_scores, pixel_labels)
    pro_score, sweep = pro_curve(maps, masks, fpr_limit=fpr_limit, n_thresholds=n_thresholds)
    return EvalReport(
        image_rocauc=image_auc, pixel_rocauc=pixel_auc, pro_score=pro_score, sweep=sweep
    )


def evaluate_grouped(
    maps: Sequence[AnomalyMap],
    masks: Sequence[GroundTruthMask],
    image_labels: Sequence[int],
    class_of: Mapping[str, str],
    fpr_limit: float = 0.3,
) -> tuple[dict[str, EvalReport], dict[str, float]]:
    """Per-class reports plus the macro average of the three metrics."""
    by_class: dict[str, list[int]] = {}
    for i, amap in enumerate(maps):
        by_class.setdefault(class_of[amap.image_id], []).append(i)
    reports = {}
    for cls in sorted(by_class):
        idx = by_class[cls]
        reports[cls] = evaluate(
            [maps[i] for i in idx],
            [m for m in masks if class_of[m.image_id] == cls],
            [image_labels[i] for i in idx],
            fpr_limit=fpr_limit,
        )
    macro = {
        "image_rocauc": float(np.mean([r.image_rocauc for r in reports.values()])),
        "pixel_rocauc": float(np.mean([r.pixel_rocauc for r in reports.values()])),
        "pro_score": float(np.mean([r.pro_score for r in reports.values()])),
    }
    return reports, macro
