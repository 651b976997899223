"""Reading localizations off class activation maps.

Point predictions take the maximum of the per-class probability map;
box predictions threshold the map at a fraction of its per-class peak,
keep the largest 4-connected foreground region, and report its bounding
box. Map coordinates are converted to image coordinates by the
cell-center rule for points and the cell-span rule for boxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from scipy.special import expit

__all__ = [
    "Box",
    "PointPrediction",
    "cam_probabilities",
    "predict_point",
    "predict_box",
    "iou",
    "point_hit",
    "default_point_tolerance",
    "format_point_record",
    "format_box_record",
    "parse_prediction_record",
]

# 4-connectivity: blobs touching only diagonally count as separate regions.
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int64)


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box, max edges exclusive."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"empty box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class PointPrediction:
    cls: int
    x: int
    y: int
    score: float


def cam_probabilities(cam: NDArray[np.float64]) -> NDArray[np.float64]:
    """Per-pixel sigmoid of a raw activation map (any shape)."""
    cam = np.asarray(cam, dtype=np.float64)
    if not np.all(np.isfinite(cam)):
        raise ValueError("activation map contains non-finite values")
    return expit(cam)


def _cell_center(i: int, j: int, map_shape: tuple[int, int],
                 image_size: tuple[int, int]) -> tuple[int, int]:
    h, w = map_shape
    width, height = image_size
    return int((j + 0.5) * width / w), int((i + 0.5) * height / h)


def predict_point(prob_map: NDArray[np.float64], cls: int,
                  image_size: tuple[int, int]) -> PointPrediction:
    """Highest-probability location of one class, in image coordinates.

    Ties are broken by the first occurrence in row-major map order. A map
    cell maps to the image pixel at its center.
    """
    channel = prob_map[cls]
    flat = int(np.argmax(channel))
    i, j = divmod(flat, channel.shape[1])
    x, y = _cell_center(i, j, channel.shape, image_size)
    return PointPrediction(cls=cls, x=x, y=y, score=float(channel[i, j]))


def predict_box(prob_map: NDArray[np.float64], cls: int, image_size: tuple[int, int],
                threshold_frac: float = 0.10) -> Box | None:
    """Bounding box of the largest above-threshold region of one class.

    Foreground is every pixel strictly above ``threshold_frac`` times the
    channel maximum. Among 4-connected foreground components the one with
    the most pixels wins; size ties go to the component containing the
    smallest row-major pixel index. The box spans the full image-pixel
    extent covered by the component's map cells.
    """
    if not 0.0 < threshold_frac < 1.0:
        raise ValueError("threshold_frac must lie in (0, 1)")
    channel = prob_map[cls]
    peak = float(channel.max())
    if peak <= 0.0:  # unreachable for sigmoid outputs, kept for totality
        return None
    mask = channel > threshold_frac * peak
    labels, count = ndimage.label(mask, structure=FOUR_CONNECTED)
    if count == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, count + 1))
    best_size = sizes.max()
    candidates = [k + 1 for k in range(count) if sizes[k] == best_size]
    if len(candidates) == 1:
        best = candidates[0]
    else:
        flat = labels.reshape(-1)
        best = min(candidates, key=lambda k: int(np.argmax(flat == k)))

    rows, cols = np.nonzero(labels == best)
    h, w = channel.shape
    width, height = image_size
    return Box(
        x_min=int(cols.min()) * width // w,
        y_min=int(rows.min()) * height // h,
        x_max=(int(cols.max()) + 1) * width // w,
        y_max=(int(rows.max()) + 1) * height // h,
    )


def iou(a: Box, b: Box) -> float:
    """Intersection over union under pixel-area semantics."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def point_hit(p: PointPrediction, gt_boxes, tolerance_px: int) -> bool:
    """True if the point lies in any of the boxes grown by the tolerance.

    The boxes passed in must already be filtered to the prediction's
    class; growing happens on all four sides.
    """
    if tolerance_px < 0:
        raise ValueError("tolerance_px must be non-negative")
    for box in gt_boxes:
        if (box.x_min - tolerance_px <= p.x < box.x_max + tolerance_px
                and box.y_min - tolerance_px <= p.y < box.y_max + tolerance_px):
            return True
    return False


def default_point_tolerance(image_size: tuple[int, int]) -> int:
    """18 px at a 512 px reference scale, scaled linearly to this image."""
    return round(18 * min(image_size) / 512)


# ---------------------------------------------------------------------------
# Line-delimited prediction dump format
# ---------------------------------------------------------------------------

def format_point_record(image_id: str, p: PointPrediction) -> str:
    return (f"image={image_id} class={p.cls} kind=point "
            f"x={p.x} y={p.y} score={p.score:.17g}")


def format_box_record(image_id: str, cls: int, box: Box, score: float) -> str:
    return (f"image={image_id} class={cls} kind=box "
            f"x0={box.x_min} y0={box.y_min} x1={box.x_max} y1={box.y_max} "
            f"score={score:.17g}")


def parse_prediction_record(line: str) -> dict:
    """Parse one dump line into a field dict (strings left as strings)."""
    fields = {}
    for token in line.strip().split(" "):
        key, _, value = token.partition("=")
        if not _:
            raise ValueError(f"malformed prediction record: {line!r}")
        fields[key] = value
    if fields.get("kind") not in {"point", "box"}:
        raise ValueError(f"unknown prediction kind in record: {line!r}")
    return fields
