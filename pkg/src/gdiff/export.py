"""Plain-text and image writers for samples, trajectories and tables."""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np


def atomic_write(path, data: bytes | str) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode()
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def points_csv(x: np.ndarray) -> str:
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    lines = [",".join(f"x{j}" for j in range(x.shape[1]))]
    lines += [",".join(repr(float(v)) for v in row) for row in x]
    return "\n".join(lines) + "\n"


def read_points_csv(text: str) -> np.ndarray:
    rows = text.strip().splitlines()[1:]
    return np.array([[float(v) for v in r.split(",")] for r in rows])


def image_grid(images: np.ndarray, ncols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile ``(n, h, w)`` images with values in [0, 1] into one uint8 array."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    ncols = ncols or int(math.ceil(math.sqrt(n)))
    nrows = int(math.ceil(n / ncols))
    grid = np.zeros((nrows * (h + pad) + pad, ncols * (w + pad) + pad), dtype=np.uint8)
    pix = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = pix[i]
    return grid


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
