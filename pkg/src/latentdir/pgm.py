"""Binary PGM (P5) output for 8-bit grayscale images."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if np.any(img < 0) or np.any(img > 255) or np.any(img != np.round(img)):
            raise ValueError("pixel values must be integers in 0..255")
        img = img.astype(np.uint8)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Parse a binary P5 file with maxval 255 (header comments allowed)."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5" or maxval != 255:
        raise ValueError("only binary 8-bit PGM (P5, maxval 255) is supported")
    pixels = np.frombuffer(data[pos + 1: pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError("truncated PGM data")
    return pixels.reshape(h, w).copy()


def save_pgm(path, image) -> None:
    Path(path).write_bytes(write_pgm(image))


def montage(rows: list[list[np.ndarray]]) -> np.ndarray:
    """Tile a grid of equally sized images without gaps."""
    shapes = {img.shape for row in rows for img in row}
    if len(shapes) != 1:
        raise ValueError(f"montage cells differ in shape: {sorted(shapes)}")
    return np.vstack([np.hstack(row) for row in rows])
