"""Desk-scale datasets: 2-D point clouds and small greyscale images.

Point clouds are standardised to zero mean and unit variance per coordinate;
images are scaled to [-1, 1].
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Any, Iterator

import numpy as np


class IDXFormatError(ValueError):
    pass


class Dataset:
    kind = "points"
    data_shape: tuple[int, ...] = (2,)

    def raw_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return raw

    def to_raw(self, x: np.ndarray) -> np.ndarray:
        return x

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.normalize(self.raw_sample(n, rng))

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
        while True:
            yield self.sample(batch_size, rng)

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.data_shape))


class _Standardized(Dataset):
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, raw):
        return (raw - self.mean) / self.std

    def to_raw(self, x):
        return np.asarray(x) * self.std + self.mean


class Ring8(_Standardized):
    """Eight isotropic Gaussians evenly spaced on a circle."""

    def __init__(self, radius: float = 4.0, sigma: float = 0.1):
        if radius <= 0 or sigma <= 0:
            raise ValueError("radius and sigma must be positive")
        self.radius, self.sigma = float(radius), float(sigma)
        ang = 2.0 * np.pi * np.arange(8) / 8
        self.centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self.mean = np.zeros(2)
        self.std = np.full(2, math.sqrt(radius ** 2 / 2.0 + sigma ** 2))

    def raw_sample(self, n, rng):
        idx = rng.integers(0, 8, size=n)
        return self.centers[idx] + self.sigma * rng.standard_normal((n, 2))

    @property
    def modes(self) -> np.ndarray:
        """Mode centres in standardised coordinates."""
        return self.normalize(self.centers)

    @property
    def mode_sigma(self) -> float:
        return self.sigma / float(self.std[0])


class SwissRoll(_Standardized):
    def __init__(self, noise: float = 0.25):
        self.noise = float(noise)
        ref = self.raw_sample(100_000, np.random.default_rng(20240601))
        self.mean = ref.mean(axis=0)
        self.std = ref.std(axis=0)

    def raw_sample(self, n, rng):
        t = 1.5 * np.pi * (1.0 + 2.0 * rng.random(n))
        pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
        return pts + self.noise * rng.standard_normal((n, 2))


class Checkerboard(_Standardized):
    """Uniform points on the eight dark cells of a 4x4 board over [-2, 2)^2."""

    def __init__(self):
        self.cells = np.array([(i, j) for i in range(-2, 2) for j in range(-2, 2)
                               if (i + j) % 2 == 0], dtype=np.float64)
        self.mean = np.zeros(2)
        self.std = np.full(2, math.sqrt(4.0 / 3.0))

    def raw_sample(self, n, rng):
        idx = rng.integers(0, len(self.cells), size=n)
        return self.cells[idx] + rng.random((n, 2))

    @staticmethod
    def in_dark_cell(raw: np.ndarray) -> np.ndarray:
        f = np.floor(raw)
        inside = np.all((raw >= -2) & (raw < 2), axis=1)
        return inside & ((f[:, 0] + f[:, 1]) % 2 == 0)


class _Images(Dataset):
    kind = "image"

    def normalize(self, raw):
        return raw * 2.0 - 1.0

    def to_raw(self, x):
        return (np.asarray(x) + 1.0) / 2.0


class Glyphs8x8(_Images):
    """Procedural binary 8x8 shapes: bars, boxes, crosses, diagonals."""

    data_shape = (8, 8)
    SHAPES = ("hbar", "vbar", "box", "block", "plus", "diag", "anti", "ex")

    def raw_sample(self, n, rng):
        out = np.zeros((n, 8, 8))
        kinds = rng.integers(0, len(self.SHAPES), size=n)
        for i, k in enumerate(kinds):
            img = out[i]
            name = self.SHAPES[k]
            a = int(rng.integers(1, 7))
            if name == "hbar":
                img[a, 1:7] = 1
            elif name == "vbar":
                img[1:7, a] = 1
            elif name in ("box", "block"):
                size = int(rng.integers(3, 7))
                r0, c0 = rng.integers(0, 9 - size, size=2)
                if name == "block":
                    img[r0:r0 + size, c0:c0 + size] = 1
                else:
                    img[r0, c0:c0 + size] = img[r0 + size - 1, c0:c0 + size] = 1
                    img[r0:r0 + size, c0] = img[r0:r0 + size, c0 + size - 1] = 1
            elif name == "plus":
                b = int(rng.integers(1, 7))
                img[a, 1:7] = 1
                img[1:7, b] = 1
            else:
                d = np.arange(8)
                if name in ("diag", "ex"):
                    img[d, d] = 1
                if name in ("anti", "ex"):
                    img[d, 7 - d] = 1
        return out


def read_idx(data: bytes) -> np.ndarray:
    """Parse an IDX (unsigned byte) file into a uint8 array."""
    if len(data) < 4:
        raise IDXFormatError("file shorter than the 4-byte magic")
    if data[0] != 0 or data[1] != 0:
        raise IDXFormatError("magic must start with two zero bytes")
    if data[2] != 0x08:
        raise IDXFormatError(f"unsupported element type 0x{data[2]:02x} (only unsigned byte)")
    ndim = data[3]
    if ndim < 1:
        raise IDXFormatError("zero dimensions")
    if len(data) < 4 + 4 * ndim:
        raise IDXFormatError("truncated dimension table")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    n = int(np.prod(dims, dtype=np.int64))
    body = data[4 + 4 * ndim:]
    if len(body) != n:
        raise IDXFormatError(f"expected {n} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    return (bytes([0, 0, 0x08, images.ndim]) + struct.pack(f">{images.ndim}I", *images.shape)
            + images.tobytes())


class IDXImages(_Images):
    def __init__(self, path):
        arr = read_idx(Path(path).read_bytes())
        if arr.ndim != 3:
            raise IDXFormatError(f"expected a (count, rows, cols) image file, got {arr.ndim} dims")
        self.images = arr.astype(np.float64) / 255.0
        self.data_shape = tuple(arr.shape[1:])

    def raw_sample(self, n, rng):
        return self.images[rng.integers(0, len(self.images), size=n)]


_DATASET_KEYS = {
    "ring8": {"radius", "sigma"},
    "swiss_roll": {"noise"},
    "checkerboard": set(),
    "glyphs8x8": set(),
    "file": {"path"},
}


def make_dataset(spec: dict[str, Any] | str) -> Dataset:
    """Build a dataset from ``{"name": ..., **params}`` or a bare name."""
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec.get("name")
    if name not in _DATASET_KEYS:
        raise ValueError(f"unknown dataset {name!r}")
    extra = set(spec) - _DATASET_KEYS[name] - {"name"}
    if extra:
        raise ValueError(f"unknown keys for dataset {name}: {sorted(extra)}")
    kw = {k: v for k, v in spec.items() if k != "name"}
    if name == "ring8":
        return Ring8(**kw)
    if name == "swiss_roll":
        return SwissRoll(**kw)
    if name == "checkerboard":
        return Checkerboard()
    if name == "glyphs8x8":
        return Glyphs8x8()
    if "path" not in kw:
        raise ValueError("file dataset needs a path")
    return IDXImages(kw["path"])
