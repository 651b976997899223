"""Minimal binary PPM (P6) / PGM (P5) reading and writing.

The dataset is stored as maxval-255 binary netpbm files because they are
trivially parseable from any language and byte-stable across runs.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

__all__ = ["write_ppm", "read_ppm", "write_pgm", "read_pgm"]


def write_ppm(path, pixels: NDArray[np.uint8]) -> None:
    """Write an (H, W, 3) uint8 array as a binary PPM."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError("write_ppm expects an (H, W, 3) uint8 array")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_pgm(path, pixels: NDArray[np.uint8]) -> None:
    """Write an (H, W) uint8 array as a binary PGM."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("write_pgm expects an (H, W) uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _read_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if not data.startswith(magic):
        raise ValueError(f"{path}: not a {magic.decode()} netpbm file")
    # Header = magic + 3 whitespace-separated ints; '#' starts a comment.
    tokens: list[int] = []
    pos = len(magic)
    while len(tokens) < 3:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated netpbm header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(int(data[pos:end]))
            pos = end
    return tokens[0], tokens[1], pos + 1  # single whitespace after maxval


def read_ppm(path) -> NDArray[np.uint8]:
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, offset = _read_header(data, b"P6", path)
    expected = w * h * 3
    raw = data[offset:offset + expected]
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def read_pgm(path) -> NDArray[np.uint8]:
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, offset = _read_header(data, b"P5", path)
    expected = w * h
    raw = data[offset:offset + expected]
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
