"""Fitting-error curves: how well each density family fits forward-chain residuals.

For every timestep in a list, a forward chain is run on a batch of elements,
the residual ``x_t - sqrt(alpha_bar_t) x0`` is histogrammed, and Gaussian,
mixture and shifted-Gamma densities are fitted by least squares. Repeats use
independent RNG streams spawned from one seed.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .forward import residual_histogram
from .noise import NoiseFamily, family_from_dict
from .schedule import NoiseSchedule, schedule_from_dict
from .stats import fit_histogram


@dataclass
class CurveSpec:
    schedule: dict[str, Any]
    family: dict[str, Any]
    t_list: list[int]
    family_tags: list[str] = field(default_factory=lambda: ["gaussian", "gamma"])
    repeats: int = 100
    bins: int = 200
    n_elements: int = 4096
    seed: int = 0
    iterate: bool = True


@dataclass
class CurveResult:
    spec: CurveSpec
    # (t, tag) -> fit_mse per repeat
    mse: dict[tuple[int, str], np.ndarray]
    gamma_k_bar: dict[int, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[int, str, float, float]]:
        out = []
        for t in self.spec.t_list:
            for tag in self.spec.family_tags:
                v = self.mse[(t, tag)]
                out.append((t, tag, float(v.mean()), float(v.std())))
        return out

    def win_fraction(self, t: int, winner: str = "gamma", loser: str = "gaussian") -> float:
        """Share of repeats where ``winner`` fits at least as well as ``loser``."""
        return float(np.mean(self.mse[(t, winner)] <= self.mse[(t, loser)]))

    def mean_ratio(self, t: int, num: str = "gaussian", den: str = "gamma") -> float:
        return float(self.mse[(t, num)].mean() / self.mse[(t, den)].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "family", "fit_mse", "std"])
        for t, tag, m, sd in self.rows():
            w.writerow([t, tag, repr(m), repr(sd)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "t": self.spec.t_list,
            "curves": {tag: {"mean": [float(self.mse[(t, tag)].mean()) for t in self.spec.t_list],
                             "std": [float(self.mse[(t, tag)].std()) for t in self.spec.t_list]}
                       for tag in self.spec.family_tags},
        }, sort_keys=True)


def _one_repeat(ss: np.random.SeedSequence, spec: CurveSpec, s: NoiseSchedule,
                fam: NoiseFamily) -> dict[tuple[int, str], float]:
    rng = np.random.default_rng(ss)
    x0 = np.zeros(spec.n_elements)
    res = {}
    for t in spec.t_list:
        h = residual_histogram(x0, t, fam, s, rng, n_draws=1, bins=spec.bins,
                               iterate=spec.iterate)
        for tag in spec.family_tags:
            res[(t, tag)] = fit_histogram(h, tag).fit_mse
    return res


def fitting_error_curve(spec: CurveSpec, threads: int = 1) -> CurveResult:
    s = schedule_from_dict(spec.schedule)
    fam = family_from_dict(spec.family)
    fam.validate(s)
    for t in spec.t_list:
        s.check_t(t)
    if spec.repeats < 1:
        raise ValueError("repeats must be >= 1")
    streams = np.random.SeedSequence(spec.seed).spawn(spec.repeats)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_rep = list(pool.map(lambda ss: _one_repeat(ss, spec, s, fam), streams))
    else:
        per_rep = [_one_repeat(ss, spec, s, fam) for ss in streams]
    mse = {key: np.array([r[key] for r in per_rep]) for key in per_rep[0]}
    kb = {}
    if fam.tag == "gamma":
        gp = fam.params(s)
        kb = {t: float(gp.k_bar[t - 1]) for t in spec.t_list}
    return CurveResult(spec, mse, kb)


def default_curve_spec(**overrides) -> CurveSpec:
    """Gamma forward chain whose accumulated shape stays small over the listed steps."""
    base = dict(
        schedule={"type": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
        family={"family": "gamma", "theta0": 0.1},
        t_list=[1, 20, 50, 100, 200],
    )
    base.update(overrides)
    return CurveSpec(**base)


def summarize(result: CurveResult, t_values: Sequence[int] | None = None) -> list[dict[str, Any]]:
    out = []
    for t in t_values or result.spec.t_list:
        out.append({"t": t, "gamma_wins": result.win_fraction(t),
                    "gauss_over_gamma": result.mean_ratio(t),
                    "k_bar": result.gamma_k_bar.get(t)})
    return out
