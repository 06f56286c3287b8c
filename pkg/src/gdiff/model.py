"""A small numpy MLP noise predictor with exact backprop and Adam.

The conditioning scalar (``t/T`` in timestep mode, ``sqrt(alpha_bar_t)`` in
noise-level mode) is expanded into Fourier features and concatenated to the
input. Hidden layers use SiLU; the output layer is linear.

Checkpoint layout (all integers little-endian)::

    b"GDNM" | u32 version | u32 header_len | header JSON (utf-8) | f64 blob

The blob holds every weight matrix (row-major, shape ``(fan_in, fan_out)``)
followed by its bias, layer by layer; when the header carries an ``adam``
entry the first and second moment buffers follow in the same order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"GDNM"
FORMAT_VERSION = 1
COND_MODES = ("timestep_embedding", "noise_level_scalar")


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file is corrupt, truncated or of the wrong kind."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Denoiser:
    """Fully connected epsilon predictor.

    Args:
        data_dim: size of one flattened sample.
        hidden: widths of the hidden layers.
        cond_mode: ``"timestep_embedding"`` or ``"noise_level_scalar"``.
        T: chain length, used to map integer timesteps to ``t/T``.
        n_freq: number of Fourier frequencies for the conditioning scalar.
        seed: initialisation seed.
    """

    def __init__(self, data_dim: int, hidden=(128, 128, 128), cond_mode: str = "timestep_embedding",
                 T: int = 1000, n_freq: int = 8, seed: int = 0):
        if cond_mode not in COND_MODES:
            raise ValueError(f"unknown conditioning mode {cond_mode!r}")
        if data_dim < 1 or T < 1 or n_freq < 0 or any(h < 1 for h in hidden):
            raise ValueError("invalid architecture")
        self.data_dim = int(data_dim)
        self.hidden = [int(h) for h in hidden]
        self.cond_mode = cond_mode
        self.T = int(T)
        self.n_freq = int(n_freq)
        self.freqs = np.pi * 2.0 ** np.arange(self.n_freq)
        sizes = [self.data_dim + self.cond_dim] + self.hidden + [self.data_dim]
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def cond_dim(self) -> int:
        return 1 + 2 * self.n_freq

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def arch(self) -> dict[str, Any]:
        return {"data_dim": self.data_dim, "hidden": self.hidden, "cond_mode": self.cond_mode,
                "T": self.T, "n_freq": self.n_freq, "activation": "silu"}

    def cond_scalar(self, cond) -> np.ndarray:
        """Map timesteps (timestep mode) or noise levels to the network's scalar input."""
        c = np.asarray(cond, dtype=np.float64)
        if self.cond_mode == "timestep_embedding":
            return c / self.T
        return c

    def embed(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64).reshape(-1, 1)
        ang = c * self.freqs
        return np.concatenate([c, np.sin(ang), np.cos(ang)], axis=1)

    def _prepare(self, x, cond):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        x2 = x.reshape(1, -1) if squeeze else x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.data_dim:
            raise ValueError(f"input has {x2.shape[1]} features, model expects {self.data_dim}")
        c = np.broadcast_to(self.cond_scalar(cond), (x2.shape[0],))
        return x2, c, squeeze

    def _forward(self, x2, c, keep: bool):
        h = np.concatenate([x2, self.embed(c)], axis=1)
        cache = []
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if keep:
                cache.append((h, z))
            h = z * _sigmoid(z) if i < n_layers - 1 else z
        return h, cache

    def forward(self, x, cond) -> np.ndarray:
        """Predict the noise for a batch ``(B, data_dim)`` or a single sample."""
        x2, c, squeeze = self._prepare(x, cond)
        out, _ = self._forward(x2, c, keep=False)
        x = np.asarray(x)
        return out.reshape(x.shape)

    __call__ = forward

    def loss_and_grad(self, x, cond, target) -> tuple[float, list[np.ndarray]]:
        """Mean absolute error and its exact (sub)gradient; ``sign(0)`` is taken as 0."""
        x2, c, _ = self._prepare(x, cond)
        tgt = np.asarray(target, dtype=np.float64).reshape(x2.shape)
        out, cache = self._forward(x2, c, keep=True)
        r = out - tgt
        loss = float(np.mean(np.abs(r)))
        delta = np.sign(r) / r.size
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        n_layers = len(cache)
        for i in reversed(range(n_layers)):
            h_in, z = cache[i]
            if i < n_layers - 1:
                sg = _sigmoid(z)
                delta = delta * (sg * (1.0 + z * (1.0 - sg)))
            grads[2 * i] = h_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.params[2 * i].T
        return loss, grads

    def copy(self) -> "Denoiser":
        other = object.__new__(Denoiser)
        other.__dict__.update(self.__dict__)
        other.hidden = list(self.hidden)
        other.params = [p.copy() for p in self.params]
        return other


def forward(model: Denoiser, x_t, cond) -> np.ndarray:
    return model.forward(x_t, cond)


def loss_and_grad(model: Denoiser, batch) -> tuple[float, list[np.ndarray]]:
    """L1 loss over a batch of training pairs (or one stacked pair)."""
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise ValueError("empty batch")
        x = np.stack([np.asarray(p.x_t).ravel() for p in batch])
        c = np.array([p.t for p in batch], dtype=np.float64)
        y = np.stack([np.asarray(p.target).ravel() for p in batch])
        return model.loss_and_grad(x, c, y)
    return model.loss_and_grad(batch.x_t, batch.t, batch.target)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: Denoiser, lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in model.params],
                   [np.zeros_like(p) for p in model.params], lr=lr, **kw)

    def hyper(self) -> dict[str, Any]:
        return {"step": self.step, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}


def adam_step(model: Denoiser, grads, state: AdamState) -> tuple[Denoiser, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    if len(grads) != len(model.params):
        raise ValueError("gradient list does not match the model parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(model.params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


# ---------------------------------------------------------------------------
# Serialisation


@dataclass
class Checkpoint:
    model: Denoiser
    header: dict[str, Any]
    adam: AdamState | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def to_bytes(model: Denoiser, meta: dict[str, Any] | None = None,
             adam: AdamState | None = None) -> bytes:
    header: dict[str, Any] = {"arch": model.arch(), "n_params": model.n_params,
                              "meta": meta or {}}
    arrays = list(model.params)
    if adam is not None:
        header["adam"] = adam.hyper()
        arrays += adam.m + adam.v
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + blob


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic bytes, not a model checkpoint", 0)
    if len(data) < 12:
        raise CheckpointFormatError("truncated preamble", len(data))
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}", 4)
    if len(data) < 12 + hlen:
        raise CheckpointFormatError("truncated header", len(data))
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        arch = header["arch"]
        model = Denoiser(arch["data_dim"], arch["hidden"], arch["cond_mode"],
                         arch["T"], arch["n_freq"], seed=0)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}", 12) from exc
    shapes = [p.shape for p in model.params]
    n_sets = 3 if "adam" in header else 1
    need = n_sets * model.n_params * 8
    offset = 12 + hlen
    if len(data) - offset < need:
        raise CheckpointFormatError(
            f"parameter blob truncated: expected {need} bytes, found {len(data) - offset}",
            len(data))
    if len(data) - offset > need:
        raise CheckpointFormatError("trailing bytes after parameter blob", offset + need)
    sets = []
    for _ in range(n_sets):
        arrs = []
        for shp in shapes:
            n = int(np.prod(shp))
            a = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
            if not np.all(np.isfinite(a)):
                raise CheckpointFormatError("non-finite parameter value", offset)
            arrs.append(a.reshape(shp))
            offset += 8 * n
        sets.append(arrs)
    model.params = sets[0]
    adam = None
    if n_sets == 3:
        h = header["adam"]
        adam = AdamState(sets[1], sets[2], step=int(h["step"]), lr=float(h["lr"]),
                         beta1=float(h["beta1"]), beta2=float(h["beta2"]), eps=float(h["eps"]))
    return Checkpoint(model, header, adam, header.get("meta", {}))


def save(model: Denoiser, path, meta: dict[str, Any] | None = None,
         adam: AdamState | None = None) -> None:
    """Write atomically: a temp file in the same directory is renamed into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model, meta, adam))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def load(path) -> Denoiser:
    return load_checkpoint(path).model
