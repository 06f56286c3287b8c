"""Statistical machinery used to check the noise processes and score samples.

Includes the two-sample Kolmogorov-Smirnov test, moment estimators with
standard errors, histograms with least-squares density fitting (Gaussian,
two-component mixture, shifted Gamma), and 1-D / sliced Wasserstein
distances.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import optimize

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov


def ks_statistic(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def kolmogorov_sf(lam: float) -> float:
    """Survival function of the Kolmogorov distribution, ``P(K > lam)``."""
    if lam <= 0.0:
        return 1.0
    if lam < 1.18:
        # small-lambda form converges where the alternating series does not
        y = math.exp(-(math.pi ** 2) / (8.0 * lam * lam))
        s = sum(y ** ((2 * j - 1) ** 2) for j in range(1, 8))
        return float(min(1.0, max(0.0, 1.0 - math.sqrt(2.0 * math.pi) / lam * s)))
    s = 0.0
    for j in range(1, 101):
        term = (-1) ** (j - 1) * math.exp(-2.0 * j * j * lam * lam)
        s += term
        if abs(term) < 1e-16:
            break
    return float(min(1.0, max(0.0, 2.0 * s)))


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample KS statistic and its asymptotic p-value."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size < 100 or b.size < 100:
        raise ValueError("ks_two_sample needs at least 100 samples per side")
    d = ks_statistic(a, b)
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    return d, kolmogorov_sf(en * d)


def ks_critical_value(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic rejection threshold for the two-sample statistic."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c * math.sqrt((n + m) / (n * m))


# ---------------------------------------------------------------------------
# Moments


class Moments(NamedTuple):
    mean: float
    var: float
    skew: float
    se_mean: float
    se_var: float
    se_skew: float
    n: int


def moments(x) -> Moments:
    """Unbiased mean/variance, sample skewness, and their standard errors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    mean = float(x.mean())
    d = x - mean
    m2 = float(np.mean(d * d))
    var = m2 * n / (n - 1)
    if m2 > 0:
        m3 = float(np.mean(d * d * d))
        m4 = float(np.mean(d ** 4))
        skew = m3 / m2 ** 1.5
        se_var = math.sqrt(max(m4 - m2 * m2, 0.0) / n)
    else:
        skew, se_var = 0.0, 0.0
    return Moments(mean, var, skew, math.sqrt(var / n), se_var, math.sqrt(6.0 / n), n)


def mc_moments(sampler: Callable[[int], np.ndarray], n: int) -> Moments:
    """Draw ``n`` values from ``sampler(n)`` and summarise them."""
    if n < 1000:
        raise ValueError("mc_moments expects n >= 1000")
    return moments(sampler(n))


# ---------------------------------------------------------------------------
# Special functions and densities

_LANCZOS_G = 7.0
_LANCZOS = np.array([
    0.99999999999980993, 676.5203681218851, -1259.1392167224028,
    771.32342877765313, -176.61502916214059, 12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7,
])


def lgamma(x):
    """log Gamma(x) for x > 0 by the Lanczos approximation (g=7, n=9)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("lgamma is only defined here for x > 0")
    small = x < 0.5
    # reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
    z = np.where(small, 1.0 - x, x) - 1.0
    a = np.full_like(z, _LANCZOS[0])
    for i in range(1, 9):
        a = a + _LANCZOS[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    lg = LOG_SQRT_2PI + (z + 0.5) * np.log(t) - t + np.log(a)
    out = np.where(small, np.log(np.pi / np.abs(np.sin(np.pi * x))) - lg, lg)
    return float(out) if out.ndim == 0 else out


def _stirling_correction(k):
    """``lgamma(k) - [(k - 1/2) log k - k + log sqrt(2 pi)]``."""
    k = np.asarray(k, dtype=np.float64)
    big = k >= 10.0
    kb = np.where(big, k, 10.0)
    r = 1.0 / kb
    r2 = r * r
    series = r * (1.0 / 12 - r2 * (1.0 / 360 - r2 * (1.0 / 1260 - r2 / 1680)))
    ks = np.where(big, 1.0, k)
    direct = lgamma(ks) - ((ks - 0.5) * np.log(ks) - ks + LOG_SQRT_2PI)
    return np.where(big, series, direct)


def gaussian_pdf(x, mu: float, sigma: float) -> np.ndarray:
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return np.exp(-0.5 * z * z - LOG_SQRT_2PI) / sigma


def mixture_pdf(x, m1: float, m2: float, phi: float, p: float) -> np.ndarray:
    return p * gaussian_pdf(x, m1, phi) + (1.0 - p) * gaussian_pdf(x, m2, phi)


def shifted_gamma_pdf(x, mean: float, std: float, k: float) -> np.ndarray:
    """Density of ``loc + Gamma(k, theta)`` parameterised by mean, std and shape.

    Written in standardised form so it stays accurate as ``k`` grows and the
    density approaches a Gaussian.
    """
    x = np.asarray(x, dtype=np.float64)
    sk = math.sqrt(k)
    u = (x - mean) / (std * sk)  # (y - k)/k with y the unit-scale Gamma variate
    inside = u > -1.0
    us = np.where(inside, u, 0.0)
    lp = np.log1p(us)
    logf = (-math.log(std) - LOG_SQRT_2PI - float(_stirling_correction(k))
            + k * (lp - us) - lp)
    with np.errstate(over="ignore", under="ignore"):
        return np.where(inside, np.exp(logf), 0.0)


def gamma_shape_scale(mean: float, std: float, k: float) -> tuple[float, float, float]:
    """Convert (mean, std, k) into (k, theta, shift) with ``shift`` the support edge."""
    theta = std / math.sqrt(k)
    return k, theta, mean - k * theta


# ---------------------------------------------------------------------------
# Histograms


@dataclass(frozen=True, eq=False)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int
    density: np.ndarray
    degenerate: bool = False

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count", "density"])
        for lo, hi, c, d in zip(self.edges[:-1], self.edges[1:], self.counts, self.density):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c), repr(float(d))])
        return buf.getvalue()


def make_histogram(values, bins: int = 200) -> Histogram:
    """Equal-width histogram spanning the observed range, with density."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot histogram an empty sample")
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
        with np.errstate(over="ignore", divide="ignore"):
            density = counts / (v.size * np.diff(edges))
        if np.all(np.diff(edges) > 0) and np.all(np.isfinite(density)):
            return Histogram(edges, counts, int(v.size), density)
    # a single value, or a spread too narrow to resolve into bins
    edges = np.array([lo - 0.5, lo + 0.5])
    counts = np.array([v.size])
    return Histogram(edges, counts, int(v.size), counts / float(v.size), degenerate=True)


# ---------------------------------------------------------------------------
# Histogram fitting


@dataclass
class FitResult:
    tag: str
    params: dict[str, float]
    fit_mse: float
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def pdf(self, x) -> np.ndarray:
        p = self.params
        if self.tag == "gaussian":
            return gaussian_pdf(x, p["mu"], p["sigma"])
        if self.tag == "mixture":
            return mixture_pdf(x, p["m1"], p["m2"], p["phi"], p["p"])
        if self.tag == "gamma":
            return shifted_gamma_pdf(x, p["mean"], p["std"], p["k"])
        raise ValueError(f"unknown family tag {self.tag!r}")


def histogram_mse(h: Histogram, pdf_values) -> float:
    r = np.asarray(pdf_values) - h.density
    return float(np.mean(r * r))


_K_MIN, _K_MAX = 0.05, 1e12


def _gaussian_from(v):
    return {"mu": v[0], "sigma": math.exp(v[1])}


def _gamma_from(v):
    k = float(np.clip(math.exp(min(v[2], 60.0)), _K_MIN, _K_MAX))
    return {"mean": v[0], "std": math.exp(v[1]), "k": k}


def _mixture_from(v):
    return {"m1": v[0], "m2": v[1], "phi": math.exp(v[2]), "p": 1.0 / (1.0 + math.exp(-v[3]))}


_FAMILIES = {
    "gaussian": (_gaussian_from, lambda x, q: gaussian_pdf(x, q["mu"], q["sigma"])),
    "gamma": (_gamma_from, lambda x, q: shifted_gamma_pdf(x, q["mean"], q["std"], q["k"])),
    "mixture": (_mixture_from, lambda x, q: mixture_pdf(x, q["m1"], q["m2"], q["phi"], q["p"])),
}


def _hist_moments(h: Histogram) -> tuple[float, float, float]:
    w = h.counts / h.counts.sum()
    c = h.centers
    mu = float(np.sum(w * c))
    var = float(np.sum(w * (c - mu) ** 2))
    sd = math.sqrt(max(var, 1e-300))
    skew = float(np.sum(w * (c - mu) ** 3)) / sd ** 3
    return mu, sd, skew


def _minimize(fun, starts, max_evals):
    best = None
    for x0 in starts:
        with np.errstate(all="ignore"):
            res = optimize.minimize(fun, np.asarray(x0, dtype=np.float64), method="Powell",
                                    options={"maxfev": max_evals, "xtol": 1e-8, "ftol": 1e-12})
        if best is None or res.fun < best.fun:
            best = res
    return best


def fit_histogram(h: Histogram, family_tag: str, max_evals: int = 4000) -> FitResult:
    """Least-squares fit of a density to the histogram at its bin centres.

    Starts from moment-matched guesses (several for the Gamma and mixture
    families, including a near-Gaussian one) and refines each with Powell's
    direction-set method; the best local optimum is kept.
    """
    if h.degenerate:
        raise ValueError("cannot fit a degenerate histogram")
    if family_tag not in _FAMILIES:
        raise ValueError(f"unknown family tag {family_tag!r}")
    to_params, pdf = _FAMILIES[family_tag]
    x = h.centers

    def loss(v):
        q = to_params(v)
        val = histogram_mse(h, pdf(x, q))
        return val if math.isfinite(val) else 1e300

    def gauss_loss(v):
        return histogram_mse(h, gaussian_pdf(x, v[0], math.exp(v[1])))

    mu, sd, skew = _hist_moments(h)
    gauss = _minimize(gauss_loss, [[mu, math.log(sd)]], max_evals)
    g_mu, g_logsd = gauss.x
    if family_tag == "gaussian":
        res = gauss
    elif family_tag == "gamma":
        starts = [[g_mu, g_logsd, math.log(1e6)], [mu, math.log(sd), math.log(1e6)]]
        if skew > 0:
            k_mom = float(np.clip(4.0 / skew ** 2, _K_MIN, 1e8))
            starts.append([mu, math.log(sd), math.log(k_mom)])
            starts.append([g_mu, g_logsd, math.log(k_mom)])
        res = _minimize(loss, starts, max_evals)
    else:
        gsd = math.exp(g_logsd)
        starts = [
            [g_mu, g_mu, g_logsd, 0.0],
            [g_mu + 0.8 * gsd, g_mu - 0.8 * gsd, math.log(0.6 * gsd), 0.0],
            [g_mu + 0.5 * gsd, g_mu - 0.5 * gsd, math.log(0.85 * gsd), 0.0],
        ]
        res = _minimize(loss, starts, max_evals)
    params = {k: float(v) for k, v in to_params(res.x).items()}
    mse = histogram_mse(h, pdf(x, params))
    fr = FitResult(family_tag, params, mse, converged=bool(res.success))
    if family_tag == "gamma":
        k, theta, shift = gamma_shape_scale(params["mean"], params["std"], params["k"])
        fr.extra = {"theta": theta, "shift": shift}
    return fr


# ---------------------------------------------------------------------------
# Wasserstein distances


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical distributions on the line."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.concatenate([a, b])
    grid.sort()
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * np.diff(grid)))


def random_directions(dim: int, n_proj: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n_proj, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(A, B, n_proj: int = 256, seed: int = 0) -> float:
    """Mean W1 over random unit-vector projections (seeded)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError("expected two (n, d) point sets with equal d")
    dirs = random_directions(A.shape[1], n_proj, np.random.default_rng(seed))
    pa, pb = A @ dirs.T, B @ dirs.T
    return float(np.mean([wasserstein_1d(pa[:, i], pb[:, i]) for i in range(n_proj)]))


sliced_wasserstein_2d = sliced_wasserstein
