"""Reverse-process samplers for all three noise families.

``ddpm_step`` is the ancestral update with ``sigma_t**2 = beta_t``; the added
noise is the family's unit-variance accumulated noise at the target step.
``ddim_step`` goes through the predicted clean sample and is deterministic
at ``eta = 0``. Both accept an arbitrary previous timestep so that reduced
step counts reuse the same code: for a jump ``t -> t_prev`` the effective
per-step alpha is ``alpha_bar_t / alpha_bar_{t_prev}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .noise import NoiseFamily
from .schedule import NoiseSchedule, timestep_subsequence


@dataclass
class SamplerConfig:
    kind: str = "ddpm"
    eta: float = 0.0
    steps: list[int] = field(default_factory=list)
    clip_x0: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("steps must be strictly increasing")
        if self.steps and self.steps[0] < 1:
            raise ValueError("steps must be >= 1")

    @classmethod
    def evenly_spaced(cls, kind: str, T: int, n_steps: int | None = None, eta: float = 0.0,
                      clip_x0: bool = False) -> "SamplerConfig":
        steps = timestep_subsequence(T, n_steps or T)
        return cls(kind=kind, eta=eta, steps=steps, clip_x0=clip_x0)


@dataclass
class Trajectory:
    snapshots: list[tuple[int, np.ndarray]]
    x0: np.ndarray

    def to_jsonl(self) -> str:
        lines = []
        for t, x in self.snapshots:
            lines.append(json.dumps({"t": int(t), "shape": list(x.shape),
                                     "data": [float(v) for v in np.ravel(x)]}))
        return "\n".join(lines) + "\n"


def _check_eps(x_t, eps_hat):
    if np.shape(eps_hat) != np.shape(x_t):
        raise ValueError("eps_hat must have the same shape as x_t")


def ddpm_step(x_t, t: int, eps_hat, family: NoiseFamily, s: NoiseSchedule,
              rng: np.random.Generator, t_prev: int | None = None) -> np.ndarray:
    """Ancestral update from ``t`` to ``t_prev`` (default ``t - 1``)."""
    t = s.check_t(t)
    t_prev = t - 1 if t_prev is None else s.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError("t_prev must be smaller than t")
    _check_eps(x_t, eps_hat)
    ab_t = s.alpha_bar_at(t)
    a = ab_t / s.alpha_bar_at(t_prev)
    x = (x_t - (1.0 - a) / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(a)
    if t_prev >= 1:
        z = family.unit_noise(s, t_prev, np.shape(x_t), rng)
        x = x + math.sqrt(1.0 - a) * z
    return x


def ddim_sigma(s: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t, ab_p = s.alpha_bar_at(t), s.alpha_bar_at(t_prev)
    return eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)


def ddim_step(x_t, t: int, t_prev: int, eps_hat, family: NoiseFamily, s: NoiseSchedule,
              eta: float, rng: np.random.Generator, clip_x0: bool = False) -> np.ndarray:
    """Update through the predicted clean sample, stepping ``t -> t_prev``."""
    t = s.check_t(t)
    t_prev = s.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError("t_prev must be smaller than t")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    _check_eps(x_t, eps_hat)
    ab_t, ab_p = s.alpha_bar_at(t), s.alpha_bar_at(t_prev)
    x0_pred = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    if clip_x0:
        x0_pred = np.clip(x0_pred, -1.0, 1.0)
    sigma = ddim_sigma(s, t, t_prev, eta)
    resid = 1.0 - ab_p - sigma * sigma
    if resid < -1e-12:
        raise ValueError(f"eta={eta} gives sigma^2 above 1 - alpha_bar at t_prev={t_prev}")
    x = math.sqrt(ab_p) * x0_pred + math.sqrt(max(resid, 0.0)) * eps_hat
    if sigma > 0.0 and t_prev >= 1:
        x = x + sigma * family.unit_noise(s, t_prev, np.shape(x_t), rng)
    return x


def predict_eps(model, s: NoiseSchedule, x: np.ndarray, t: int) -> np.ndarray:
    """Call a predictor with the conditioning it expects.

    Models exposing ``cond_mode == "noise_level_scalar"`` receive
    ``sqrt(alpha_bar_t)``; everything else receives the integer timestep.
    """
    if getattr(model, "cond_mode", None) == "noise_level_scalar":
        cond = math.sqrt(s.alpha_bar_at(t))
    else:
        cond = t
    return model(x, np.full(x.shape[0], cond, dtype=np.float64))


def sample(model, family: NoiseFamily, s: NoiseSchedule, cfg: SamplerConfig, n: int,
           rng: np.random.Generator, data_shape: tuple[int, ...] | None = None,
           record: Iterable[int] | None = None) -> Trajectory:
    """Generate ``n`` samples, starting from unit-variance family noise at the top step.

    Args:
        model: callable ``model(x, cond)`` returning the noise estimate.
        data_shape: per-sample shape; defaults to ``(model.data_dim,)``.
        record: timesteps whose states are kept in the trajectory; the
            initial state and the final sample are always kept.
    """
    steps = cfg.steps or list(range(1, s.T + 1))
    if steps[-1] > s.T:
        raise ValueError("sampler steps exceed the schedule length")
    if data_shape is None:
        data_shape = (model.data_dim,)
    shape = (n,) + tuple(data_shape)
    keep = set(record or ())
    x = family.unit_noise(s, steps[-1], shape, rng)
    snapshots = [(steps[-1], x.copy())]
    for i in range(len(steps) - 1, -1, -1):
        t = steps[i]
        t_prev = steps[i - 1] if i > 0 else 0
        eps = predict_eps(model, s, x, t)
        if cfg.kind == "ddpm":
            x = ddpm_step(x, t, eps, family, s, rng, t_prev=t_prev)
        else:
            x = ddim_step(x, t, t_prev, eps, family, s, cfg.eta, rng, clip_x0=cfg.clip_x0)
        if t_prev in keep and t_prev > 0:
            snapshots.append((t_prev, x.copy()))
    snapshots.append((0, x.copy()))
    return Trajectory(snapshots, x)


class PointMassOracle:
    """Exact noise predictor for a dataset concentrated on a single point.

    Since ``x_t = sqrt(ab_t) x0* + sqrt(1 - ab_t) * target``, the target is
    recovered exactly from ``x_t``.
    """

    def __init__(self, x0_star, s: NoiseSchedule):
        self.x0_star = np.asarray(x0_star, dtype=np.float64)
        self.s = s
        self.data_dim = self.x0_star.size

    def __call__(self, x, t) -> np.ndarray:
        t = int(np.ravel(t)[0])
        ab = self.s.alpha_bar_at(t)
        return (x - math.sqrt(ab) * self.x0_star) / math.sqrt(1.0 - ab)
