"""Deterministic synthetic-shapes dataset with point and box annotations.

Each image is a gray noisy background with 1..3 colored shapes (disc,
square, triangle, ring). Every instance records its class, a tight
ground-truth box, and a single annotation point that stands in for a
human click: the shape centroid, except for the ring where the centroid
falls in the hole and the point sits on the annulus instead.

Which classes appear together is steered by a pair-preference weight
matrix, so label co-occurrence statistics (and hence the PPMI embedding)
can be made non-trivial on demand.

On-disk layout per split::

    <dir>/images/<id>.ppm     binary PPM, maxval 255
    <dir>/annotations.json    classes/points/boxes per image
    <dir>/manifest.txt        seed, config echo, content hash

Generation is byte-identical for identical seeds.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .detection import Box, iou
from .netpbm import read_ppm, write_ppm

__all__ = [
    "CLASS_NAMES",
    "DatasetConfig",
    "Instance",
    "Sample",
    "generate_samples",
    "generate_dataset",
    "load_dataset",
    "bias_preset",
]

CLASS_NAMES = ("disc", "square", "triangle", "ring")

# Base paint color per class; instances jitter around these. Distinct
# hues keep the desk-scale task reliably learnable by a tiny network.
_BASE_COLORS = np.array([
    [0.85, 0.20, 0.20],   # disc
    [0.20, 0.78, 0.25],   # square
    [0.25, 0.35, 0.90],   # triangle
    [0.90, 0.85, 0.20],   # ring
])

_PLACEMENT_ATTEMPTS = 40


@dataclass(frozen=True)
class DatasetConfig:
    image_size: tuple[int, int] = (64, 64)      # (width, height)
    class_count: int = 4
    image_count: int = 600
    min_objects: int = 1
    max_objects: int = 3
    size_range: tuple[float, float] = (0.15, 0.35)
    cooccurrence_bias: NDArray[np.float64] | None = None
    background_gray: float = 0.5
    background_noise: float = 0.03
    max_overlap_iou: float = 0.20
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.class_count <= len(CLASS_NAMES):
            raise ValueError(f"class_count must be in [1, {len(CLASS_NAMES)}]")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("need at least one object per image")
        if self.cooccurrence_bias is not None:
            b = np.asarray(self.cooccurrence_bias)
            if b.shape != (self.class_count, self.class_count) or np.any(b < 0):
                raise ValueError("cooccurrence_bias must be a non-negative CxC matrix")


def bias_preset(name: str, class_count: int) -> NDArray[np.float64] | None:
    """Named co-occurrence presets: 'uniform' or 'correlated'."""
    if name == "uniform":
        return None
    if name == "correlated":
        # Pair weights show up as positive PMI once images hold two or more
        # objects, yet stay weak enough that paired classes keep distinct
        # embedding directions.
        bias = np.ones((class_count, class_count))
        pairs = [(0, 1, 4.0), (2, 3, 3.0)]
        for a, b, w in pairs:
            if a < class_count and b < class_count:
                bias[a, b] = bias[b, a] = w
        return bias
    raise ValueError(f"unknown bias preset {name!r}")


@dataclass(frozen=True)
class Instance:
    # Loaded data always carries a box and a point; augmentation may null
    # either when a transform pushes it out of the frame.
    cls: int
    box: Box | None
    point: tuple[int, int] | None


@dataclass(frozen=True)
class Sample:
    image_id: str
    image: NDArray[np.float64]      # (3, H, W), values in [0, 1]
    instances: tuple[Instance, ...] = field(default=())

    @property
    def present_classes(self) -> list[int]:
        return sorted({inst.cls for inst in self.instances})

    def boxes_of_class(self, cls: int) -> list[Box]:
        return [inst.box for inst in self.instances
                if inst.cls == cls and inst.box is not None]


# ---------------------------------------------------------------------------
# Shape rasterization
# ---------------------------------------------------------------------------

def _shape_mask(cls: int, cx: int, cy: int, half: int, width: int,
                height: int) -> NDArray[np.bool_]:
    ys, xs = np.mgrid[0:height, 0:width]
    dx, dy = xs - cx, ys - cy
    name = CLASS_NAMES[cls]
    if name == "disc":
        return dx * dx + dy * dy <= half * half
    if name == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if name == "triangle":
        # Upward triangle with apex (cx, cy-half), base y = cy+half.
        inside = (dy <= half) & (dy >= -half)
        # Left/right edges: |dx| <= half * (dy + half) / (2*half)
        return inside & (np.abs(dx) * 2 * half <= half * (dy + half))
    if name == "ring":
        inner = 0.55 * half
        d2 = dx * dx + dy * dy
        return (d2 <= half * half) & (d2 >= inner * inner)
    raise ValueError(f"no rasterizer for class {cls}")


def _instance_point(cls: int, cx: int, cy: int, half: int) -> tuple[int, int]:
    name = CLASS_NAMES[cls]
    if name == "triangle":
        return cx, cy + round(half / 3)         # vertex centroid
    if name == "ring":
        return cx + round(0.775 * half), cy     # mid-annulus, centroid is in the hole
    return cx, cy


def _pick_classes(rng: np.random.Generator, count: int,
                  config: DatasetConfig) -> list[int]:
    c = config.class_count
    bias = config.cooccurrence_bias
    chosen = [int(rng.integers(c))]
    while len(chosen) < count:
        if bias is None:
            chosen.append(int(rng.integers(c)))
        else:
            weights = np.mean([np.asarray(bias)[s] for s in chosen], axis=0)
            weights = weights / weights.sum()
            chosen.append(int(rng.choice(c, p=weights)))
    return chosen


def _render_sample(image_id: str, rng: np.random.Generator,
                   config: DatasetConfig) -> Sample:
    width, height = config.image_size
    noise = rng.normal(0.0, config.background_noise, size=(height, width))
    canvas = np.clip(config.background_gray + noise, 0.0, 1.0)
    raster = np.repeat(canvas[np.newaxis], 3, axis=0)

    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    classes = _pick_classes(rng, n_objects, config)
    instances: list[Instance] = []
    for cls in classes:
        placed = None
        for _ in range(_PLACEMENT_ATTEMPTS):
            frac = rng.uniform(*config.size_range)
            half = max(3, round(frac * min(width, height) / 2))
            cx = int(rng.integers(half + 1, width - half - 1))
            cy = int(rng.integers(half + 1, height - half - 1))
            mask = _shape_mask(cls, cx, cy, half, width, height)
            rows, cols = np.nonzero(mask)
            box = Box(x_min=int(cols.min()), y_min=int(rows.min()),
                      x_max=int(cols.max()) + 1, y_max=int(rows.max()) + 1)
            if all(iou(box, prev.box) <= config.max_overlap_iou for prev in instances):
                placed = (mask, box, cx, cy, half)
                break
        if placed is None:
            continue  # crowded frame; instance dropped, >= 1 always placed
        mask, box, cx, cy, half = placed
        color = np.clip(_BASE_COLORS[cls] + rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)
        raster[:, mask] = color[:, np.newaxis]
        instances.append(Instance(cls=cls, box=box,
                                  point=_instance_point(cls, cx, cy, half)))

    # Quantize to the on-disk uint8 scale so in-memory samples match what
    # a load round-trip produces.
    quantized = np.round(raster * 255.0).astype(np.uint8)
    return Sample(image_id=image_id, image=quantized.astype(np.float64) / 255.0,
                  instances=tuple(instances))


def generate_samples(config: DatasetConfig) -> list[Sample]:
    """Generate the dataset in memory; deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    return [_render_sample(f"img_{i:04d}", rng, config)
            for i in range(config.image_count)]


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _annotations_document(samples: list[Sample], config: DatasetConfig) -> dict:
    images = []
    for s in samples:
        images.append({
            "id": s.image_id,
            "file": f"images/{s.image_id}.ppm",
            "classes": s.present_classes,
            "points": [[inst.cls, inst.point[0], inst.point[1]] for inst in s.instances],
            "boxes": [[inst.cls, inst.box.x_min, inst.box.y_min,
                       inst.box.x_max, inst.box.y_max] for inst in s.instances],
        })
    return {
        "format": "camloc-annotations v1",
        "class_names": list(CLASS_NAMES[:config.class_count]),
        "image_size": list(config.image_size),
        "images": images,
    }


def _config_echo(config: DatasetConfig) -> list[str]:
    if config.cooccurrence_bias is None:
        bias = "uniform"
    else:
        bias = ",".join(f"{v:.17g}" for v in np.asarray(config.cooccurrence_bias).ravel())
    return [
        f"seed={config.seed}",
        f"image_size={config.image_size[0]}x{config.image_size[1]}",
        f"class_count={config.class_count}",
        f"images={config.image_count}",
        f"objects={config.min_objects}..{config.max_objects}",
        f"size_range={config.size_range[0]:.17g}..{config.size_range[1]:.17g}",
        f"max_overlap_iou={config.max_overlap_iou:.17g}",
        f"background={config.background_gray:.17g}+-{config.background_noise:.17g}",
        f"bias={bias}",
    ]


def generate_dataset(config: DatasetConfig, output_path) -> dict:
    """Write one split to disk; returns the manifest as a dict."""
    samples = generate_samples(config)
    image_dir = os.path.join(output_path, "images")
    try:
        os.makedirs(image_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {output_path}: {exc}") from exc

    digest = hashlib.sha256()
    annotations = json.dumps(_annotations_document(samples, config),
                             indent=2, sort_keys=True).encode("ascii")
    with open(os.path.join(output_path, "annotations.json"), "wb") as fh:
        fh.write(annotations)
    digest.update(annotations)
    for s in samples:
        pixels = np.round(s.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        path = os.path.join(image_dir, f"{s.image_id}.ppm")
        write_ppm(path, pixels)
        with open(path, "rb") as fh:
            digest.update(fh.read())

    manifest_lines = ["camloc-dataset v1", *_config_echo(config),
                      f"content_sha256={digest.hexdigest()}"]
    with open(os.path.join(output_path, "manifest.txt"), "w", encoding="ascii") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    return {"path": str(output_path), "images": len(samples),
            "content_sha256": digest.hexdigest()}


def load_dataset(path) -> tuple[list[Sample], dict]:
    """Load a split from disk, validating every sample invariant.

    Returns (samples, annotations document). Raises ValueError naming the
    offending file (and position, for JSON syntax errors) on any
    malformed input, and on any invariant violation.
    """
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise ValueError(f"{manifest_path}: manifest missing")
    with open(manifest_path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != "camloc-dataset v1":
            raise ValueError(f"{manifest_path}: unrecognized manifest header")

    ann_path = os.path.join(path, "annotations.json")
    try:
        with open(ann_path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{ann_path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc

    if doc.get("format") != "camloc-annotations v1":
        raise ValueError(f"{ann_path}: unrecognized annotations format")
    width, height = doc["image_size"]
    samples = []
    for entry in doc["images"]:
        image_id = entry["id"]
        pixels = read_ppm(os.path.join(path, entry["file"]))
        if pixels.shape[:2] != (height, width):
            raise ValueError(f"{entry['file']}: image size does not match annotations")
        image = pixels.astype(np.float64).transpose(2, 0, 1) / 255.0
        if len(entry["points"]) != len(entry["boxes"]):
            raise ValueError(f"{ann_path}: image {image_id}: points/boxes length mismatch")
        instances = []
        for (pc, px, py), (bc, x0, y0, x1, y1) in zip(entry["points"], entry["boxes"]):
            if pc != bc:
                raise ValueError(f"{ann_path}: image {image_id}: point/box class mismatch")
            if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
                raise ValueError(f"{ann_path}: image {image_id}: box outside image bounds")
            if not (x0 <= px < x1 and y0 <= py < y1):
                raise ValueError(f"{ann_path}: image {image_id}: point outside its box")
            instances.append(Instance(cls=int(pc), box=Box(x0, y0, x1, y1),
                                      point=(int(px), int(py))))
        recorded = sorted({inst.cls for inst in instances})
        if recorded != sorted(entry["classes"]):
            raise ValueError(f"{ann_path}: image {image_id}: classes field inconsistent")
        samples.append(Sample(image_id=image_id, image=image, instances=tuple(instances)))
    return samples, doc
