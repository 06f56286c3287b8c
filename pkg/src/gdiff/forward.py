"""Forward (noising) process: one-jump closed-form draws and iterated chains."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .noise import NoiseFamily
from .schedule import NoiseSchedule
from .stats import Histogram, make_histogram


@dataclass
class TrainingPair:
    x_t: np.ndarray
    t: np.ndarray | int
    target: np.ndarray


def closed_form_sample(x0, t: int, family: NoiseFamily, s: NoiseSchedule,
                       rng: np.random.Generator) -> TrainingPair:
    """Jump straight from ``x0`` to ``x_t``; the target is the unit-variance noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = s.check_t(t)
    raw = family.raw_noise(s, t, x0.shape, rng)
    x_t = math.sqrt(s.alpha_bar[t - 1]) * x0 + family.scale_raw(s, t, raw)
    return TrainingPair(x_t, t, family.target(s, t, raw))


def closed_form_batch(x0: np.ndarray, t: np.ndarray, family: NoiseFamily, s: NoiseSchedule,
                      rng: np.random.Generator) -> TrainingPair:
    """Closed-form draws for a batch with one timestep per leading row."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    raw = family.raw_noise_rows(s, t, x0.shape, rng)
    noise_f, target_f = family.row_factors(s, t)
    tail = (1,) * (x0.ndim - 1)
    mean_f = np.sqrt(s.alpha_bar[t - 1]).reshape((-1,) + tail)
    x_t = mean_f * x0 + noise_f.reshape((-1,) + tail) * raw
    return TrainingPair(x_t, t, target_f.reshape((-1,) + tail) * raw)


def iterate_chain(x0, t: int, family: NoiseFamily, s: NoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    """Apply the one-step recurrence ``t`` times starting from ``x0``."""
    x = np.array(x0, dtype=np.float64)
    t = s.check_t(t)
    for i in range(1, t + 1):
        x = math.sqrt(s.alpha[i - 1]) * x + family.step_noise(s, i, x.shape, rng)
    return x


def residual_histogram(x0, t: int, family: NoiseFamily, s: NoiseSchedule,
                       rng: np.random.Generator, n_draws: int = 1, bins: int = 200,
                       iterate: bool = True) -> Histogram:
    """Histogram of ``x_t - sqrt(alpha_bar_t) * x0`` pooled over draws and elements.

    The chain is iterated step by step unless ``iterate`` is False, in which
    case the closed-form jump is used.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if bins < 10:
        raise ValueError("bins must be >= 10")
    if t == 0:
        raise ValueError("the residual is undefined before the first step")
    t = s.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    scale = math.sqrt(s.alpha_bar[t - 1])
    xs = np.broadcast_to(x0, (n_draws,) + x0.shape)
    if iterate:
        x_t = iterate_chain(xs, t, family, s, rng)
    else:
        x_t = closed_form_sample(xs, t, family, s, rng).x_t
    return make_histogram(x_t - scale * xs, bins=bins)
