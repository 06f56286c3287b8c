"""Noise schedules and the per-step quantities derived from them.

Timesteps are 1-based at every public boundary (``t`` in ``1..T``); the
arrays stored on :class:`NoiseSchedule` are 0-based, so ``beta[t - 1]`` is
the variance added at step ``t``. ``alpha_bar_at(0)`` is defined as 1 so
samplers can step down to the clean sample.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """A T-step variance schedule with every derived array precomputed."""

    beta: np.ndarray
    kind: str = "explicit"
    params: dict[str, Any] = field(default_factory=dict)
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    one_minus_alpha_bar: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ValueError("beta must be a non-empty 1-D array")
        if not np.all(np.isfinite(beta)) or np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("every beta_t must lie in the open interval (0, 1)")
        alpha = 1.0 - beta
        object.__setattr__(self, "beta", _frozen(beta))
        object.__setattr__(self, "alpha", _frozen(alpha))
        object.__setattr__(self, "alpha_bar", _frozen(np.cumprod(alpha)))
        # 1 - alpha_bar without the cancellation of a plain subtraction
        object.__setattr__(self, "one_minus_alpha_bar",
                           _frozen(-np.expm1(np.cumsum(np.log1p(-beta)))))
        object.__setattr__(self, "sigma", _frozen(np.sqrt(beta)))
        object.__setattr__(self, "_digest",
                           hashlib.sha256(self.beta.astype("<f8").tobytes()).hexdigest())

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not isinstance(t, (int, np.integer)) or not lo <= t <= self.T:
            raise ValueError(f"timestep {t!r} outside [{lo}, {self.T}]")
        return int(t)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product up to step ``t``; 1.0 at ``t == 0``."""
        t = self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self.check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self.check_t(t) - 1])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self.check_t(t) - 1])

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"type": self.kind, "T": self.T}
        d.update(self.params)
        d["beta"] = [float(b) for b in self.beta]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def digest(self) -> str:
        """SHA-256 over the little-endian float64 beta array."""
        return self._digest

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return np.array_equal(self.beta, other.beta)

    def __hash__(self) -> int:
        return hash(self.digest())


def _check_bounds(*values: float) -> None:
    for v in values:
        if not 0.0 < v < 1.0:
            raise ValueError(f"beta bound {v!r} outside (0, 1)")


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Betas evenly spaced from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    _check_bounds(beta_start, beta_end)
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    if T == 1:
        beta = np.array([beta_start])
    else:
        beta = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(beta, kind="linear",
                         params={"beta_start": beta_start, "beta_end": beta_end})


def fibonacci_schedule(T: int, beta_1: float, beta_2: float,
                       beta_max: float = 0.999) -> NoiseSchedule:
    """Betas following ``b_t = b_{t-1} + b_{t-2}``, clipped at ``beta_max``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if beta_1 <= 0 or beta_2 <= 0:
        raise ValueError("Fibonacci seeds must be positive")
    if not 0.0 < beta_max < 1.0:
        raise ValueError("beta_max must lie in (0, 1)")
    _check_bounds(beta_1, beta_2)
    beta = [beta_1, beta_2][:T]
    while len(beta) < T:
        beta.append(min(beta[-1] + beta[-2], beta_max))
    return NoiseSchedule(np.array(beta), kind="fibonacci",
                         params={"beta_1": beta_1, "beta_2": beta_2, "beta_max": beta_max})


def explicit_schedule(beta) -> NoiseSchedule:
    return NoiseSchedule(np.asarray(beta, dtype=np.float64), kind="explicit")


def snr_stats(s: NoiseSchedule, t: int) -> tuple[float, float]:
    """Return ``(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`` for step ``t``."""
    ab = s.alpha_bar[s.check_t(t) - 1]
    return float(np.sqrt(ab)), float(np.sqrt(s.one_minus_alpha_bar[t - 1]))


def schedule_from_dict(d: dict[str, Any]) -> NoiseSchedule:
    """Rebuild a schedule from its JSON form.

    Parametric kinds are regenerated from their parameters; when a ``beta``
    list is also present it must agree with the regenerated one.
    """
    kind = d.get("type")
    if kind == "linear":
        s = linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))
    elif kind == "fibonacci":
        s = fibonacci_schedule(int(d["T"]), float(d["beta_1"]), float(d["beta_2"]),
                               float(d.get("beta_max", 0.999)))
    elif kind == "explicit":
        if "beta" not in d:
            raise ValueError("explicit schedule requires a beta list")
        s = explicit_schedule(d["beta"])
        if "T" in d and int(d["T"]) != s.T:
            raise ValueError("T does not match len(beta)")
    else:
        raise ValueError(f"unknown schedule type {kind!r}")
    if kind != "explicit" and "beta" in d:
        if not np.array_equal(np.asarray(d["beta"], dtype=np.float64), s.beta):
            raise ValueError("stored beta list disagrees with schedule parameters")
    return s


def schedule_from_json(text: str) -> NoiseSchedule:
    return schedule_from_dict(json.loads(text))


def timestep_subsequence(T: int, n_steps: int) -> list[int]:
    """Evenly spaced, strictly increasing timesteps in ``1..T`` ending at ``T``."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, {T}]")
    # spacing T/n >= 1, so half-up rounding keeps the sequence strictly increasing
    return [int(np.floor(T * i / n_steps + 0.5)) for i in range(1, n_steps + 1)]
