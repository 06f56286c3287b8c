"""Noise families for the forward and reverse processes.

Three families are supported:

* ``Gaussian``: the usual DDPM noise.
* ``Mixture``: a zero-mean, unit-variance mixture of two Gaussians with a
  shared standard deviation ``phi_t`` that may vary over the chain.
* ``Gamma``: centred Gamma noise ``g - E[g]`` with ``g ~ Gamma(k_t, theta_t)``,
  ``theta_t = sqrt(alpha_bar_t) * theta0`` and ``k_t = beta_t / (alpha_bar_t *
  theta0**2)``. Both scaling and addition keep it inside the Gamma family,
  so the t-step noise is again a centred Gamma with shape ``k_bar_t``.

Every family exposes the same four draws: the per-step additive term, the
raw accumulated noise, its scaled version used in the closed-form jump, and
the unit-variance regression target.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .schedule import NoiseSchedule

Shape = int | Sequence[int]


# ---------------------------------------------------------------------------
# Gamma variates


def _check_gamma(k: float, theta: float) -> None:
    if not (k > 0 and theta > 0 and math.isfinite(k) and math.isfinite(theta)):
        raise ValueError(f"Gamma parameters must be positive and finite, got k={k!r}, theta={theta!r}")


def _centered_unit_gamma_ge1(k, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``G - k`` for ``G ~ Gamma(k, 1)``, ``k >= 1`` (Marsaglia-Tsang).

    ``k`` is a scalar or an array of length ``n``. The centred value is formed
    as ``d * (v**3 - 1) - 1/3`` with ``v**3 - 1`` expanded, which keeps full
    precision when ``k`` is huge and the draw is a tiny relative perturbation
    of its mean.
    """
    d_all = np.broadcast_to(np.asarray(k, dtype=np.float64) - 1.0 / 3.0, (n,))
    c_all = 1.0 / (3.0 * np.sqrt(d_all))
    scalar = np.ndim(k) == 0
    out = np.empty(n)
    pending = np.arange(n)
    while pending.size:
        m = pending.size
        d = d_all[0] if scalar else d_all[pending]
        c = c_all[0] if scalar else c_all[pending]
        x = rng.standard_normal(m)
        u = rng.random(m)
        cx = c * x
        ok = cx > -1.0
        cx_safe = np.where(ok, cx, 0.0)
        w = cx_safe * (3.0 + cx_safe * (3.0 + cx_safe))  # (1 + cx)^3 - 1
        x2 = x * x
        squeeze = u < 1.0 - 0.0331 * x2 * x2
        with np.errstate(divide="ignore"):
            log_u = np.log(u)
        full = log_u < 0.5 * x2 + d * (3.0 * np.log1p(cx_safe) - w)
        accept = ok & (squeeze | full)
        dw = d * w - 1.0 / 3.0
        out[pending[accept]] = dw[accept]
        pending = pending[~accept]
    return out


def _unit_gamma(k, n: int, rng: np.random.Generator, centered: bool) -> np.ndarray:
    if np.ndim(k) == 0:
        if k >= 1.0:
            z = _centered_unit_gamma_ge1(k, n, rng)
            return z if centered else z + k
        # k < 1: Gamma(k) = Gamma(k + 1) * U**(1/k)
        g1 = _centered_unit_gamma_ge1(k + 1.0, n, rng) + (k + 1.0)
        u = rng.random(n)
        with np.errstate(divide="ignore"):
            g = g1 * np.exp(np.log(u) / k)
        return g - k if centered else g
    k = np.asarray(k, dtype=np.float64)
    small = k < 1.0
    z = _centered_unit_gamma_ge1(np.where(small, k + 1.0, k), n, rng)
    if np.any(small):
        ks = k[small]
        u = rng.random(ks.size)
        with np.errstate(divide="ignore"):
            g = (z[small] + ks + 1.0) * np.exp(np.log(u) / ks)
        z[small] = g - ks
    return z if centered else z + k


def _as_shape(shape: Shape) -> tuple[int, ...]:
    return (int(shape),) if isinstance(shape, (int, np.integer)) else tuple(shape)


def centered_gamma(k: float, theta: float, shape: Shape, rng: np.random.Generator) -> np.ndarray:
    """Draw ``g - k*theta`` elementwise with ``g ~ Gamma(shape=k, scale=theta)``."""
    _check_gamma(k, theta)
    shape = _as_shape(shape)
    n = int(np.prod(shape, dtype=np.int64))
    return (theta * _unit_gamma(k, n, rng, centered=True)).reshape(shape)


def gamma_variate(k: float, theta: float, rng: np.random.Generator, size: Shape | None = None):
    """Sample ``Gamma(shape=k, scale=theta)``; scalar when ``size`` is None."""
    _check_gamma(k, theta)
    if size is None:
        return float(theta * _unit_gamma(k, 1, rng, centered=False)[0])
    shape = _as_shape(size)
    n = int(np.prod(shape, dtype=np.int64))
    return (theta * _unit_gamma(k, n, rng, centered=False)).reshape(shape)


# ---------------------------------------------------------------------------
# Parameter objects


@dataclass(frozen=True)
class MixtureParams:
    p: float
    phi: float
    m1: float
    m2: float
    C: int = 2

    def moments(self) -> tuple[float, float]:
        """Exact mean and variance of ``b*e1 + (1-b)*e2``."""
        p, phi = self.p, self.phi
        mean = p * self.m1 + (1.0 - p) * self.m2
        second = p * (self.m1 ** 2 + phi ** 2) + (1.0 - p) * (self.m2 ** 2 + phi ** 2)
        return mean, second - mean ** 2


def mixture_params(p: float, phi: float) -> MixtureParams:
    """Component means giving a zero-mean, unit-variance two-Gaussian mixture.

    Args:
        p: probability of drawing from the first component.
        phi: shared component standard deviation, ``0 < phi <= 1``.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"mixture weight p={p!r} outside (0, 1)")
    if not 0.0 < phi <= 1.0:
        raise ValueError(f"component std phi={phi!r} outside (0, 1]")
    denom = p * (1.0 - p) + p ** 3 / (1.0 - p) + 2.0 * p ** 2
    m1 = math.sqrt((1.0 - phi ** 2) / denom)
    m2 = -(p / (1.0 - p)) * m1
    return MixtureParams(p=p, phi=phi, m1=m1, m2=m2)


def sample_mixture(mp: MixtureParams, shape: Shape, rng: np.random.Generator) -> np.ndarray:
    """Draw from the mixture with an independent component choice per element."""
    shape = _as_shape(shape)
    b = rng.random(shape) < mp.p
    return np.where(b, mp.m1, mp.m2) + mp.phi * rng.standard_normal(shape)


@dataclass(frozen=True)
class PhiSchedule:
    """Component std over the chain, linear in ``t/T`` or in ``sqrt(alpha_bar_t)``."""

    mode: str = "by_timestep"
    start: float = 1.0
    end: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in ("by_timestep", "by_noise_level"):
            raise ValueError(f"unknown phi schedule mode {self.mode!r}")
        for v in (self.start, self.end):
            if not 0.0 < v <= 1.0:
                raise ValueError(f"phi bound {v!r} outside (0, 1]")

    def at(self, s: NoiseSchedule, t: int) -> float:
        t = s.check_t(t)
        if self.mode == "by_timestep":
            frac = t / s.T
        else:
            frac = math.sqrt(s.alpha_bar[t - 1])
        return self.start + (self.end - self.start) * frac


@dataclass(frozen=True, eq=False)
class GammaParams:
    theta0: float
    theta_t: np.ndarray
    k_t: np.ndarray
    k_bar: np.ndarray


def gamma_params(s: NoiseSchedule, theta0: float) -> GammaParams:
    """Per-step shapes and scales so each step adds variance ``beta_t``."""
    if not (theta0 > 0 and math.isfinite(theta0)):
        raise ValueError(f"theta0 must be positive, got {theta0!r}")
    theta_t = np.sqrt(s.alpha_bar) * theta0
    k_t = s.beta / (s.alpha_bar * theta0 ** 2)
    k_bar = np.cumsum(k_t)
    for a in (theta_t, k_t, k_bar):
        a.setflags(write=False)
    return GammaParams(theta0=theta0, theta_t=theta_t, k_t=k_t, k_bar=k_bar)


# ---------------------------------------------------------------------------
# Families


def _check_rows(s: NoiseSchedule, t, shape) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    shape = _as_shape(shape)
    if t.ndim != 1 or not shape or t.size != shape[0]:
        raise ValueError("need one timestep per leading row")
    if t.size and (t.min() < 1 or t.max() > s.T):
        raise ValueError(f"timesteps outside [1, {s.T}]")
    return t


class NoiseFamily:
    """Common interface; subclasses supply the per-step and accumulated draws."""

    tag: str = ""

    def validate(self, s: NoiseSchedule) -> None:
        pass

    def step_noise(self, s: NoiseSchedule, t: int, shape: Shape, rng) -> np.ndarray:
        raise NotImplementedError

    def raw_noise(self, s: NoiseSchedule, t: int, shape: Shape, rng) -> np.ndarray:
        """Unscaled accumulated noise at step ``t`` (eps, N_t, or g_bar - E g_bar)."""
        raise NotImplementedError

    def scale_raw(self, s: NoiseSchedule, t: int, raw: np.ndarray) -> np.ndarray:
        """Turn raw accumulated noise into the additive term of the closed form."""
        return math.sqrt(s.one_minus_alpha_bar[s.check_t(t) - 1]) * raw

    def target(self, s: NoiseSchedule, t: int, raw: np.ndarray) -> np.ndarray:
        """Unit-variance regression target for raw accumulated noise."""
        return raw

    def raw_noise_rows(self, s: NoiseSchedule, t: np.ndarray, shape: Shape, rng) -> np.ndarray:
        """Raw accumulated noise with one timestep per leading row of ``shape``."""
        raise NotImplementedError

    def row_factors(self, s: NoiseSchedule, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-row multipliers taking raw noise to (closed-form term, target)."""
        v = s.one_minus_alpha_bar[np.asarray(t) - 1]
        return np.sqrt(v), np.ones_like(v)

    def accumulated_noise(self, s, t, shape, rng) -> np.ndarray:
        return self.scale_raw(s, t, self.raw_noise(s, t, shape, rng))

    def unit_noise(self, s, t, shape, rng) -> np.ndarray:
        return self.target(s, t, self.raw_noise(s, t, shape, rng))

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.tag}


class Gaussian(NoiseFamily):
    tag = "gaussian"

    def step_noise(self, s, t, shape, rng):
        return math.sqrt(s.beta_at(t)) * rng.standard_normal(shape)

    def raw_noise(self, s, t, shape, rng):
        s.check_t(t)
        return rng.standard_normal(shape)

    def raw_noise_rows(self, s, t, shape, rng):
        _check_rows(s, t, shape)
        return rng.standard_normal(_as_shape(shape))

    def __eq__(self, other):
        return isinstance(other, Gaussian)

    def __hash__(self):
        return hash(self.tag)


class Mixture(NoiseFamily):
    tag = "mixture"

    def __init__(self, p: float = 0.5, phi_schedule: PhiSchedule | None = None):
        if not 0.0 < p < 1.0:
            raise ValueError(f"mixture weight p={p!r} outside (0, 1)")
        self.p = float(p)
        self.phi_schedule = phi_schedule or PhiSchedule()

    def phi_at(self, s: NoiseSchedule, t: int) -> float:
        return self.phi_schedule.at(s, t)

    def params_at(self, s: NoiseSchedule, t: int) -> MixtureParams:
        return mixture_params(self.p, self.phi_at(s, t))

    def validate(self, s: NoiseSchedule) -> None:
        for t in range(1, s.T + 1):
            phi = self.phi_at(s, t)
            if not 0.0 < phi <= 1.0:
                raise ValueError(f"phi_t={phi!r} at t={t} outside (0, 1]")

    def step_noise(self, s, t, shape, rng):
        return math.sqrt(s.beta_at(t)) * sample_mixture(self.params_at(s, t), shape, rng)

    def raw_noise(self, s, t, shape, rng):
        return sample_mixture(self.params_at(s, t), shape, rng)

    def raw_noise_rows(self, s, t, shape, rng):
        t = _check_rows(s, t, shape)
        shape = _as_shape(shape)
        uniq, inv = np.unique(t, return_inverse=True)
        table = np.array([[mp.m1, mp.m2, mp.phi]
                          for mp in (self.params_at(s, int(v)) for v in uniq)])
        rows = table[inv].reshape((-1, 3) + (1,) * (len(shape) - 1))
        b = rng.random(shape) < self.p
        return np.where(b, rows[:, 0], rows[:, 1]) + rows[:, 2] * rng.standard_normal(shape)

    def to_dict(self):
        ps = self.phi_schedule
        return {"family": self.tag, "p": self.p,
                "phi_schedule": {"mode": ps.mode, "start": ps.start, "end": ps.end}}

    def __eq__(self, other):
        return isinstance(other, Mixture) and (self.p, self.phi_schedule) == (other.p, other.phi_schedule)

    def __hash__(self):
        return hash((self.tag, self.p, self.phi_schedule))


class Gamma(NoiseFamily):
    tag = "gamma"

    def __init__(self, theta0: float = 0.001):
        if not (theta0 > 0 and math.isfinite(theta0)):
            raise ValueError(f"theta0 must be positive, got {theta0!r}")
        self.theta0 = float(theta0)
        self._cache: dict[str, GammaParams] = {}

    def params(self, s: NoiseSchedule) -> GammaParams:
        key = s.digest()
        gp = self._cache.get(key)
        if gp is None:
            gp = self._cache[key] = gamma_params(s, self.theta0)
        return gp

    def step_noise(self, s, t, shape, rng):
        gp = self.params(s)
        i = s.check_t(t) - 1
        return centered_gamma(float(gp.k_t[i]), float(gp.theta_t[i]), shape, rng)

    def raw_noise(self, s, t, shape, rng):
        gp = self.params(s)
        i = s.check_t(t) - 1
        return centered_gamma(float(gp.k_bar[i]), float(gp.theta_t[i]), shape, rng)

    def raw_noise_rows(self, s, t, shape, rng):
        t = _check_rows(s, t, shape)
        shape = _as_shape(shape)
        gp = self.params(s)
        per_row = int(np.prod(shape[1:], dtype=np.int64))
        k = np.repeat(gp.k_bar[t - 1], per_row)
        theta = np.repeat(gp.theta_t[t - 1], per_row)
        return (theta * _unit_gamma(k, k.size, rng, centered=True)).reshape(shape)

    def row_factors(self, s, t):
        v = s.one_minus_alpha_bar[np.asarray(t) - 1]
        return np.ones_like(v), 1.0 / np.sqrt(v)

    def scale_raw(self, s, t, raw):
        s.check_t(t)
        return raw

    def target(self, s, t, raw):
        return raw / math.sqrt(s.one_minus_alpha_bar[s.check_t(t) - 1])

    def to_dict(self):
        return {"family": self.tag, "theta0": self.theta0}

    def __eq__(self, other):
        return isinstance(other, Gamma) and self.theta0 == other.theta0

    def __hash__(self):
        return hash((self.tag, self.theta0))


# Module-level forms of the family methods.

def phi_at(family: Mixture, s: NoiseSchedule, t: int) -> float:
    return family.phi_at(s, t)


def step_noise(family: NoiseFamily, s: NoiseSchedule, t: int, shape: Shape, rng) -> np.ndarray:
    return family.step_noise(s, t, shape, rng)


def accumulated_noise(family: NoiseFamily, s: NoiseSchedule, t: int, shape: Shape, rng) -> np.ndarray:
    return family.accumulated_noise(s, t, shape, rng)


def normalized_eps_target(family: NoiseFamily, s: NoiseSchedule, t: int,
                          raw_noise: np.ndarray) -> np.ndarray:
    return family.target(s, t, raw_noise)


_FAMILY_KEYS = {
    "gaussian": {"family"},
    "mixture": {"family", "p", "phi_schedule"},
    "gamma": {"family", "theta0"},
}


def family_from_dict(d: dict[str, Any]) -> NoiseFamily:
    """Build a family from its JSON form; unknown keys are rejected."""
    tag = d.get("family")
    if tag not in _FAMILY_KEYS:
        raise ValueError(f"unknown noise family {tag!r}")
    extra = set(d) - _FAMILY_KEYS[tag]
    if extra:
        raise ValueError(f"unknown keys for {tag} family: {sorted(extra)}")
    if tag == "gaussian":
        return Gaussian()
    if tag == "mixture":
        ps = d.get("phi_schedule", {})
        extra = set(ps) - {"mode", "start", "end"}
        if extra:
            raise ValueError(f"unknown keys in phi_schedule: {sorted(extra)}")
        return Mixture(p=float(d.get("p", 0.5)),
                       phi_schedule=PhiSchedule(mode=ps.get("mode", "by_timestep"),
                                                start=float(ps.get("start", 1.0)),
                                                end=float(ps.get("end", 0.5))))
    return Gamma(theta0=float(d.get("theta0", 0.001)))


def family_from_json(text: str) -> NoiseFamily:
    return family_from_dict(json.loads(text))
