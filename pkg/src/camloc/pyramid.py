"""Spatial-pyramid label encoding and pyramid average pooling.

A pyramid with levels ``(1, 2)`` splits an image into a 1x1 and a 2x2
grid. Labels are encoded per (level, tile, class) into one flat binary
vector; class activation maps are average-pooled over the same tiles
into a score vector of identical layout, so labels and pooled scores
live in the same space.

Vector layout: level-major, tiles in row-major order within a level,
class index fastest. For levels (1, 2) and C classes the first C bits
are the whole-image labels and the remaining 4C bits cover the four
quadrant tiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "PyramidSpec",
    "encode_image_labels",
    "encode_point_labels",
    "spp_average_pool",
    "spp_average_pool_backward",
    "serialize_label_vector",
    "parse_label_vector",
]


@dataclass(frozen=True)
class PyramidSpec:
    """Grid side lengths per level plus the number of classes."""

    levels: tuple[int, ...] = (1, 2)
    class_count: int = 4

    def __post_init__(self) -> None:
        if len(self.levels) == 0 or self.levels[0] != 1:
            raise ValueError("levels must be non-empty and start at 1")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be strictly increasing")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")

    @property
    def total_dim(self) -> int:
        return self.class_count * sum(l * l for l in self.levels)

    def level_offset(self, level_index: int) -> int:
        """Start of the given level's block in the flat vector."""
        return self.class_count * sum(l * l for l in self.levels[:level_index])

    def bit_index(self, level_index: int, row: int, col: int, cls: int) -> int:
        l = self.levels[level_index]
        return self.level_offset(level_index) + (row * l + col) * self.class_count + cls


def tile_of_point(x: float, y: float, width: int, height: int, level: int) -> tuple[int, int]:
    """Row/col of the level-l tile containing an image point.

    Floor arithmetic with a clamp at l-1 so the closed image domain maps
    onto valid tiles (points on the far edges land in the last tile).
    """
    row = min(int(y * level) // height, level - 1)
    col = min(int(x * level) // width, level - 1)
    return row, col


def tile_pixel_bounds(row: int, col: int, width: int, height: int,
                      level: int) -> tuple[int, int, int, int]:
    """Half-open pixel bounds (y0, y1, x0, x1) of a tile.

    Floor-based splitting partitions the grid exactly for any image size
    >= level; no pixel is dropped or counted twice.
    """
    y0, y1 = row * height // level, (row + 1) * height // level
    x0, x1 = col * width // level, (col + 1) * width // level
    return y0, y1, x0, x1


def encode_image_labels(present_classes, spec: PyramidSpec) -> NDArray[np.int64]:
    """Binary pyramid vector for image-level (whole image) annotations.

    Only the level-1 bits are set; image tags carry no tile information.
    """
    bits = np.zeros(spec.total_dim, dtype=np.int64)
    for cls in present_classes:
        if not 0 <= cls < spec.class_count:
            raise ValueError(f"class index {cls} out of range [0, {spec.class_count})")
        bits[cls] = 1
    return bits


def encode_point_labels(points, image_size: tuple[int, int],
                        spec: PyramidSpec) -> NDArray[np.int64]:
    """Binary pyramid vector for point-wise annotations.

    Every tile, at every level, that contains one of the points gets the
    bit for that point's class. A class marked anywhere at a finer level
    is by construction also marked at level 1, since the level-1 tile is
    the whole image.

    Parameters
    ----------
    points : sequence of (class, x, y) triples, pixel coordinates
    image_size : (width, height)
    """
    width, height = image_size
    bits = np.zeros(spec.total_dim, dtype=np.int64)
    for cls, x, y in points:
        if not 0 <= cls < spec.class_count:
            raise ValueError(f"class index {cls} out of range [0, {spec.class_count})")
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"point ({x}, {y}) outside {width}x{height} image")
        for li, level in enumerate(spec.levels):
            row, col = tile_of_point(x, y, width, height, level)
            bits[spec.bit_index(li, row, col, cls)] = 1
    return bits


def spp_average_pool(cam: NDArray[np.float64], spec: PyramidSpec) -> NDArray[np.float64]:
    """Average-pool a C x H x W activation map over all pyramid tiles.

    The output vector follows the pyramid layout, so entry (level, tile,
    class) is the mean activation of that class's channel over the tile.
    The level-1 entries are the per-channel global means.
    """
    cam = np.asarray(cam, dtype=np.float64)
    if cam.ndim != 3 or cam.shape[0] != spec.class_count:
        raise ValueError(f"expected map of shape ({spec.class_count}, H, W), got {cam.shape}")
    _, height, width = cam.shape
    if height < spec.levels[-1] or width < spec.levels[-1]:
        raise ValueError("map spatial dims smaller than the finest pyramid level")
    out = np.empty(spec.total_dim, dtype=np.float64)
    pos = 0
    for level in spec.levels:
        for row in range(level):
            for col in range(level):
                y0, y1, x0, x1 = tile_pixel_bounds(row, col, width, height, level)
                out[pos:pos + spec.class_count] = cam[:, y0:y1, x0:x1].mean(axis=(1, 2))
                pos += spec.class_count
    return out


def spp_average_pool_backward(grad_out: NDArray[np.float64], map_shape: tuple[int, int, int],
                              spec: PyramidSpec) -> NDArray[np.float64]:
    """Gradient of spp_average_pool w.r.t. the activation map.

    Each pooled entry spreads its gradient uniformly over its tile's
    pixels (1/count each); contributions from overlapping levels add up.
    """
    channels, height, width = map_shape
    grad_map = np.zeros(map_shape, dtype=np.float64)
    pos = 0
    for level in spec.levels:
        for row in range(level):
            for col in range(level):
                y0, y1, x0, x1 = tile_pixel_bounds(row, col, width, height, level)
                count = (y1 - y0) * (x1 - x0)
                g = grad_out[pos:pos + channels] / count
                grad_map[:, y0:y1, x0:x1] += g[:, np.newaxis, np.newaxis]
                pos += channels
    return grad_map


def serialize_label_vector(bits: NDArray[np.int64], spec: PyramidSpec) -> str:
    """One-line text form: ``spec=<l1,l2,...> C=<n> <0/1 string>``."""
    levels = ",".join(str(l) for l in spec.levels)
    body = "".join("1" if b else "0" for b in bits)
    return f"spec={levels} C={spec.class_count} {body}"


def parse_label_vector(line: str) -> tuple[NDArray[np.int64], PyramidSpec]:
    """Inverse of serialize_label_vector."""
    try:
        spec_part, c_part, body = line.strip().split(" ")
        levels = tuple(int(v) for v in spec_part.removeprefix("spec=").split(","))
        spec = PyramidSpec(levels=levels, class_count=int(c_part.removeprefix("C=")))
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed label vector line: {line!r}") from exc
    if len(body) != spec.total_dim or set(body) - {"0", "1"}:
        raise ValueError(f"label bits do not match spec dimension {spec.total_dim}")
    return np.array([int(ch) for ch in body], dtype=np.int64), spec
