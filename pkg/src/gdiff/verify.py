"""Self-check suites run by ``gdiff verify`` and the acceptance tests.

Every suite returns a list of check records ``{"check", "statistic",
"threshold", "pass"}``. A check passes when its statistic is at or below the
threshold, so each record reads as "measured error vs. allowed error".
"""

from __future__ import annotations

import math
from typing import Any, Callable

import numpy as np

from .forward import closed_form_sample
from .model import Denoiser
from .noise import Gamma, Gaussian, Mixture, NoiseFamily, PhiSchedule, gamma_params, \
    mixture_params, sample_mixture
from .reverse import PointMassOracle, SamplerConfig, sample
from .schedule import NoiseSchedule, linear_schedule, snr_stats
from .stats import ks_critical_value, ks_statistic, moments

Check = dict[str, Any]


def _check(name: str, statistic: float, threshold: float) -> Check:
    statistic = float(statistic)
    return {"check": name, "statistic": statistic, "threshold": float(threshold),
            "pass": bool(math.isfinite(statistic) and statistic <= threshold)}


def all_passed(report: list[Check]) -> bool:
    return all(c["pass"] for c in report)


def reference_schedule() -> NoiseSchedule:
    return linear_schedule(1000, 1e-4, 0.02)


def reference_families() -> dict[str, NoiseFamily]:
    return {"gaussian": Gaussian(),
            "mixture": Mixture(0.5, PhiSchedule("by_timestep", 1.0, 0.5)),
            "gamma": Gamma(0.001)}


def lemma1(n: int = 10**6, n_pairs: int = 20, seed: int = 0) -> list[Check]:
    """Mixture component means: exact moment identities plus Monte Carlo moments."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_pairs):
        p = float(rng.uniform(0.05, 0.95))
        phi = float(1.0 - rng.uniform(0.0, 0.9))  # (0.1, 1.0]
        mp = mixture_params(p, phi)
        tag = f"p={p:.4f},phi={phi:.4f}"
        mean, var = mp.moments()
        out.append(_check(f"exact_mean[{tag}]", abs(mean), 1e-12))
        out.append(_check(f"exact_var[{tag}]", abs(var - 1.0), 1e-12))
        m = moments(sample_mixture(mp, n, rng))
        out.append(_check(f"mc_mean_in_se[{tag}]", abs(m.mean) / m.se_mean, 4.0))
        out.append(_check(f"mc_var_rel[{tag}]", abs(m.var - 1.0), 0.01))
    return out


def _random_schedule(rng: np.random.Generator) -> NoiseSchedule:
    T = int(rng.integers(10, 1001))
    lo = float(10 ** rng.uniform(-5, -3))
    hi = float(rng.uniform(0.005, 0.05))
    return linear_schedule(T, lo, hi)


def lemma2(n_random: int = 10, seed: int = 0) -> list[Check]:
    """Gamma step and accumulated variances match the schedule exactly."""
    rng = np.random.default_rng(seed)
    cases = [("reference", reference_schedule(), 0.001)]
    for i in range(n_random):
        cases.append((f"random{i}", _random_schedule(rng), float(10 ** rng.uniform(-3, -1))))
    out = []
    for name, s, th in cases:
        gp = gamma_params(s, th)
        step = np.max(np.abs(gp.k_t * gp.theta_t ** 2 - s.beta) / s.beta)
        v = s.one_minus_alpha_bar
        acc = np.max(np.abs(gp.k_bar * gp.theta_t ** 2 - v) / v)
        out.append(_check(f"step_variance[{name},T={s.T},theta0={th:.3g}]", step, 1e-10))
        out.append(_check(f"accumulated_variance[{name},T={s.T},theta0={th:.3g}]", acc, 1e-10))
    return out


def _chain_snapshots(family: NoiseFamily, s: NoiseSchedule, t_list, n: int,
                     rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Iterate one chain from zero and keep the state at each listed step."""
    x = np.zeros(n)
    want = set(t_list)
    snaps = {}
    for t in range(1, max(t_list) + 1):
        x = math.sqrt(s.alpha[t - 1]) * x + family.step_noise(s, t, n, rng)
        if t in want:
            snaps[t] = x.copy()
    return snaps


def closed_form_ks(families: list[str] | None = None, t_list=(1, 5, 20, 50, 200),
                   n: int = 10**5, seeds=(0, 1, 2, 3, 4), alpha: float = 0.01) -> list[Check]:
    """Iterated versus one-jump chains from ``x0 = 0``.

    Gaussian and Gamma chains are compared with the two-sample KS statistic.
    The mixture chain is not closed in distribution, so only its first two
    moments are compared against the closed form.
    """
    s = reference_schedule()
    fams = reference_families()
    crit = ks_critical_value(n, n, alpha)
    out = []
    for name in families or ["gaussian", "gamma", "mixture"]:
        fam = fams[name]
        for seed in seeds:
            rng = np.random.default_rng([seed, 7])
            snaps = _chain_snapshots(fam, s, t_list, n, rng)
            for t in t_list:
                jump = closed_form_sample(np.zeros(n), t, fam, s, rng).x_t
                tag = f"{name},t={t},seed={seed}"
                if name == "mixture":
                    budget = s.one_minus_alpha_bar[t - 1]
                    for label, x in (("iterated", snaps[t]), ("closed", jump)):
                        m = moments(x)
                        out.append(_check(f"mean_in_se[{tag},{label}]",
                                          abs(m.mean) / m.se_mean, 4.0))
                        out.append(_check(f"var_rel[{tag},{label}]",
                                          abs(m.var / budget - 1.0), 0.01))
                else:
                    out.append(_check(f"ks[{tag}]", ks_statistic(snaps[t], jump), crit))
    return out


def variance_budget(n: int = 10**6, t_list=(1, 10, 100, 500, 1000), seed: int = 0) -> list[Check]:
    """Accumulated noise has variance ``1 - alpha_bar_t``; steps have ``beta_t``."""
    s = reference_schedule()
    rng = np.random.default_rng(seed)
    out = []
    for t in range(1, s.T + 1):
        m, sd = snr_stats(s, t)
        out.append(_check(f"gaussian_budget[t={t}]", abs(m * m + sd * sd - 1.0), 1e-14))
    for name, fam in reference_families().items():
        for t in t_list:
            acc = moments(fam.accumulated_noise(s, t, n, rng))
            out.append(_check(f"accumulated_var_rel[{name},t={t}]",
                              abs(acc.var / s.one_minus_alpha_bar[t - 1] - 1.0), 0.01))
            out.append(_check(f"accumulated_mean_in_se[{name},t={t}]",
                              abs(acc.mean) / acc.se_mean, 4.0))
            st = moments(fam.step_noise(s, t, n, rng))
            out.append(_check(f"step_var_rel[{name},t={t}]", abs(st.var / s.beta[t - 1] - 1.0), 0.01))
            u = moments(fam.unit_noise(s, t, n, rng))
            out.append(_check(f"target_var_rel[{name},t={t}]", abs(u.var - 1.0), 0.01))
    return out


def _grad_errors(net: Denoiser, rng: np.random.Generator, batch: int = 6,
                 h: float = 1e-5, max_coords: int = 200) -> float:
    x = rng.standard_normal((batch, net.data_dim))
    if net.cond_mode == "timestep_embedding":
        cond = rng.integers(1, net.T + 1, size=batch).astype(np.float64)
    else:
        cond = rng.uniform(0.05, 1.0, size=batch)
    out = net(x, cond)
    # Keep every residual at least 0.5 away from the |r| = 0 kink.
    target = out + rng.choice([-1.0, 1.0], size=out.shape) * rng.uniform(0.5, 1.0, size=out.shape)
    _, grads = net.loss_and_grad(x, cond, target)
    worst = 0.0
    for P, G in zip(net.params, grads):
        flat, gflat = P.reshape(-1), G.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = net.loss_and_grad(x, cond, target)
            flat[i] = orig - h
            lm, _ = net.loss_and_grad(x, cond, target)
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            denom = max(abs(num), abs(gflat[i]), 1e-6)
            worst = max(worst, abs(num - gflat[i]) / denom)
    return worst


GRADCHECK_DEPTHS = (1, 2, 3)
GRADCHECK_WIDTHS = (4, 16, 64)


def gradcheck(data_dim: int = 8, seed: int = 0, tol: float = 1e-4) -> list[Check]:
    """Analytic gradients against central differences over a grid of architectures."""
    rng = np.random.default_rng(seed)
    out = []
    for mode in ("timestep_embedding", "noise_level_scalar"):
        for depth in GRADCHECK_DEPTHS:
            for width in GRADCHECK_WIDTHS:
                net = Denoiser(data_dim, [width] * depth, mode, T=100, n_freq=4,
                               seed=int(rng.integers(2**31)))
                err = _grad_errors(net, rng)
                out.append(_check(f"max_rel_err[{mode},depth={depth},width={width}]", err, tol))
    return out


def oracle_sampler(n_steps: int = 50, seed: int = 0) -> list[Check]:
    """Exact noise predictor for a point-mass dataset; the sampler must return the point."""
    s = reference_schedule()
    x0 = np.array([0.7, -1.3, 2.1])
    oracle = PointMassOracle(x0, s)
    out = []
    for name, fam in reference_families().items():
        rng = np.random.default_rng(seed)
        cfg = SamplerConfig.evenly_spaced("ddim", s.T, n_steps, eta=0.0)
        x = sample(oracle, fam, s, cfg, 16, rng, data_shape=x0.shape).x0
        out.append(_check(f"ddim_eta0_max_abs_err[{name},steps={n_steps}]",
                          np.max(np.abs(x - x0)), 1e-6))
        cfg = SamplerConfig.evenly_spaced("ddpm", s.T, n_steps)
        x = sample(oracle, fam, s, cfg, 16, rng, data_shape=x0.shape).x0
        out.append(_check(f"ddpm_max_abs_err[{name},steps={n_steps}]",
                          np.max(np.abs(x - x0)), 1e-6))
    return out


SUITES: dict[str, Callable[..., list[Check]]] = {
    "lemma1": lemma1,
    "lemma2": lemma2,
    "closed_form_ks": closed_form_ks,
    "variance_budget": variance_budget,
    "gradcheck": gradcheck,
    "oracle_sampler": oracle_sampler,
}
