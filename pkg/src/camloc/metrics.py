"""Ranking metrics: average precision, classification mAP at image and
tile level, point-localization mAP, and CorLoc.

Conventions shared by all metrics here:

* AP is the all-point variant (precision summed at each positive's rank,
  divided by the positive count); an 11-point interpolated variant is
  available behind a flag for comparison.
* Classes with no positive ground-truth unit in the evaluated split are
  undefined (``None``) and excluded from means rather than scored zero.
* Score ties are broken by stable input order, so rankings are
  deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .detection import Box, PointPrediction, iou, point_hit
from .pyramid import PyramidSpec

__all__ = [
    "average_precision",
    "classification_map",
    "pointloc_map",
    "corloc",
    "ClassificationReport",
    "PointLocReport",
    "CorlocReport",
    "metric_lines",
    "format_table",
]


def average_precision(scored, positive_count: int,
                      eleven_point: bool = False) -> float | None:
    """AP of a scored binary ranking.

    Parameters
    ----------
    scored : sequence of (score, is_positive) pairs
    positive_count : total number of positive units in the split (the
        recall denominator; may exceed the number of retrieved positives)
    eleven_point : use the 11-point interpolated variant instead of
        all-point AP

    Returns None when positive_count is 0 (metric undefined).
    """
    if positive_count == 0:
        return None
    if positive_count < 0:
        raise ValueError("positive_count must be non-negative")
    pairs = list(scored)
    if not pairs:
        return 0.0
    scores = np.array([s for s, _ in pairs], dtype=np.float64)
    flags = np.array([bool(p) for _, p in pairs])
    order = np.argsort(-scores, kind="stable")
    hits = flags[order]
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, len(pairs) + 1)
    precision = cum_hits / ranks
    recall = cum_hits / positive_count
    if not eleven_point:
        return float(precision[hits].sum() / positive_count)
    levels = np.linspace(0.0, 1.0, 11)
    interpolated = [float(precision[recall >= r].max()) if np.any(recall >= r) else 0.0
                    for r in levels]
    return float(np.mean(interpolated))


def _mean_defined(values) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass(frozen=True)
class ClassificationReport:
    """Per-class AP at image level, plus tile-level results per pyramid
    level greater than 1 ("2x2" for the default pyramid)."""

    image_ap: dict[int, float | None]
    image_map: float | None
    tile_map: dict[int, float | None]          # level -> mAP averaged over tiles
    tile_ap: dict[int, list[float | None]]     # level -> per-tile class-mean AP


def classification_map(pooled_scores: NDArray[np.float64],
                       gt_labels: NDArray[np.int64],
                       spec: PyramidSpec) -> ClassificationReport:
    """Presence-classification mAP from pooled per-tile scores.

    Image-level AP ranks images by their level-1 score per class, with
    the images containing the class as positives. For each finer level,
    every tile is evaluated independently against the point-derived tile
    labels; class APs are averaged within each tile and then across the
    level's tiles.
    """
    pooled_scores = np.asarray(pooled_scores, dtype=np.float64)
    gt_labels = np.asarray(gt_labels)
    if pooled_scores.shape != gt_labels.shape or pooled_scores.shape[1] != spec.total_dim:
        raise ValueError("scores/labels must both be (n_images, total_dim)")
    c = spec.class_count

    def ap_at(col: int) -> float | None:
        positives = gt_labels[:, col].astype(bool)
        return average_precision(zip(pooled_scores[:, col], positives),
                                 int(positives.sum()))

    image_ap = {k: ap_at(k) for k in range(c)}
    tile_map: dict[int, float | None] = {}
    tile_ap: dict[int, list[float | None]] = {}
    for li, level in enumerate(spec.levels):
        if level == 1:
            continue
        per_tile: list[float | None] = []
        for row in range(level):
            for col in range(level):
                aps = [ap_at(spec.bit_index(li, row, col, k)) for k in range(c)]
                per_tile.append(_mean_defined(aps))
        tile_ap[level] = per_tile
        tile_map[level] = _mean_defined(per_tile)
    return ClassificationReport(
        image_ap=image_ap,
        image_map=_mean_defined(image_ap.values()),
        tile_map=tile_map,
        tile_ap=tile_ap,
    )


@dataclass(frozen=True)
class PointLocReport:
    per_class: dict[int, float | None]
    mean_ap: float | None


def pointloc_map(predictions, gt_boxes_by_image: dict, class_count: int,
                 tolerance_px: int) -> PointLocReport:
    """mAP of single-point localizations.

    Parameters
    ----------
    predictions : sequence of (image_id, PointPrediction), exactly one
        per (image, class) pair
    gt_boxes_by_image : image_id -> list of (class, Box)
    tolerance_px : hit tolerance; a point counts as correct if it falls
        inside a same-class ground-truth box grown by this many pixels

    Per class, all images' predictions are ranked by score and a
    prediction is positive iff it hits; the recall denominator is the
    number of images containing the class.
    """
    seen: set[tuple[str, int]] = set()
    by_class: dict[int, list[tuple[float, bool]]] = {k: [] for k in range(class_count)}
    for image_id, pred in predictions:
        key = (image_id, pred.cls)
        if key in seen:
            raise ValueError(f"duplicate prediction for image {image_id} class {pred.cls}")
        seen.add(key)
        boxes = [b for cls, b in gt_boxes_by_image.get(image_id, []) if cls == pred.cls]
        by_class[pred.cls].append((pred.score, point_hit(pred, boxes, tolerance_px)))

    per_class: dict[int, float | None] = {}
    for k in range(class_count):
        positive_count = sum(
            1 for boxes in gt_boxes_by_image.values() if any(cls == k for cls, _ in boxes)
        )
        per_class[k] = average_precision(by_class[k], positive_count)
    return PointLocReport(per_class=per_class, mean_ap=_mean_defined(per_class.values()))


@dataclass(frozen=True)
class CorlocReport:
    per_class: dict[int, float | None]
    mean_corloc: float | None
    pooled: float | None    # over all (image, present-class) pairs at once


def corloc(predicted_boxes, gt_boxes_by_image: dict, class_count: int,
           iou_threshold: float = 0.5, strict: bool = True) -> CorlocReport:
    """Fraction of (image, present-class) pairs localized correctly.

    Only pairs where the class actually occurs in the image are scored. A
    pair is correct when the predicted box overlaps some same-class
    ground-truth box with IoU above the threshold (strictly above by
    default). Pairs without a prediction count as incorrect.
    """
    box_lookup: dict[tuple[str, int], Box] = {}
    for image_id, cls, box in predicted_boxes:
        box_lookup[(image_id, cls)] = box

    correct = {k: 0 for k in range(class_count)}
    total = {k: 0 for k in range(class_count)}
    for image_id, entries in gt_boxes_by_image.items():
        present = {cls for cls, _ in entries}
        for cls in present:
            total[cls] += 1
            pred = box_lookup.get((image_id, cls))
            if pred is None:
                continue
            overlaps = (iou(pred, b) for c, b in entries if c == cls)
            if strict:
                hit = any(v > iou_threshold for v in overlaps)
            else:
                hit = any(v >= iou_threshold for v in overlaps)
            if hit:
                correct[cls] += 1

    per_class = {k: (correct[k] / total[k] if total[k] else None) for k in range(class_count)}
    grand_total = sum(total.values())
    pooled = sum(correct.values()) / grand_total if grand_total else None
    return CorlocReport(per_class=per_class,
                        mean_corloc=_mean_defined(per_class.values()),
                        pooled=pooled)


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.17g}"


def metric_lines(name: str, per_class: dict[int, float | None],
                 mean_value: float | None) -> list[str]:
    """Machine-readable records: ``metric=<name> class=<k|mean> value=<v>``."""
    lines = [f"metric={name} class={k} value={_fmt(v)}"
             for k, v in sorted(per_class.items())]
    lines.append(f"metric={name} class=mean value={_fmt(mean_value)}")
    return lines


def format_table(headers: list[str], rows: list[list[str]]) -> str:
    """Aligned plain-text table with a dashed header rule."""
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    def line(cells):
        return "  ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(headers), rule] + [line(r) for r in rows])
