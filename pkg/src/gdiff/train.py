"""Training loop for the epsilon predictor under any of the noise families.

Each iteration draws a batch of clean samples, one timestep per example
uniformly from ``1..T``, jumps to ``x_t`` in closed form, and takes an Adam
step on the L1 distance between the prediction and the unit-variance noise
target.

Randomness comes from three streams spawned from the config seed: model
initialisation, data, and diffusion (timesteps plus noise). Checkpoints
store the latter two generator states alongside the Adam buffers, so a
resumed run continues bit-for-bit where the original would have gone.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import model as model_mod
from .datasets import make_dataset
from .forward import closed_form_batch
from .model import AdamState, Denoiser, adam_step
from .noise import family_from_dict
from .schedule import schedule_from_dict

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict[str, Any]):
        super().__init__(message)
        self.diagnostics = diagnostics


_DEFAULTS: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "family": {"family": "gaussian"},
    "schedule": {"type": "linear", "T": 100, "beta_start": 1e-3, "beta_end": 0.2},
    "dataset": {"name": "ring8"},
    "model": {"hidden": [128, 128, 128], "cond_mode": "timestep_embedding", "n_freq": 8},
    "batch_size": 256,
    "steps": 10_000,
    "lr": 1e-3,
    "checkpoint_interval": 1000,
    "log_interval": 100,
    "early_stop": False,
}
_MODEL_KEYS = {"hidden", "cond_mode", "n_freq"}


@dataclass
class TrainConfig:
    seed: int
    family: dict[str, Any] = field(default_factory=lambda: dict(_DEFAULTS["family"]))
    schedule: dict[str, Any] = field(default_factory=lambda: dict(_DEFAULTS["schedule"]))
    dataset: dict[str, Any] = field(default_factory=lambda: dict(_DEFAULTS["dataset"]))
    model: dict[str, Any] = field(default_factory=lambda: copy.deepcopy(_DEFAULTS["model"]))
    batch_size: int = 256
    steps: int = 10_000
    lr: float = 1e-3
    checkpoint_interval: int = 1000
    log_interval: int = 100
    early_stop: bool = False
    version: int = CONFIG_VERSION

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        """Validate strictly: unknown keys and out-of-range values are errors."""
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = set(d) - set(_DEFAULTS) - {"seed"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        if "seed" not in d:
            raise ConfigError("seed", "seed is mandatory")
        merged = copy.deepcopy(_DEFAULTS)
        merged.update(copy.deepcopy(d))
        if merged["version"] != CONFIG_VERSION:
            raise ConfigError("version", f"unsupported config version {merged['version']!r}")
        for key in ("seed", "batch_size", "steps", "checkpoint_interval", "log_interval"):
            v = merged[key]
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(key, "must be an integer")
            if key == "seed" and v < 0 or key != "seed" and v < 1:
                raise ConfigError(key, "must be positive" if key != "seed" else "must be >= 0")
        if isinstance(merged["lr"], bool) or not isinstance(merged["lr"], (int, float)) \
                or not merged["lr"] > 0:
            raise ConfigError("lr", "must be a positive number")
        if not isinstance(merged["early_stop"], bool):
            raise ConfigError("early_stop", "must be true or false")
        cfg = cls(**merged)
        cfg.build()  # surfaces nested errors with their field name
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return {"version": self.version, "seed": self.seed, "family": self.family,
                "schedule": self.schedule, "dataset": self.dataset, "model": self.model,
                "batch_size": self.batch_size, "steps": self.steps, "lr": self.lr,
                "checkpoint_interval": self.checkpoint_interval,
                "log_interval": self.log_interval, "early_stop": self.early_stop}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def resume_digest(self) -> str:
        """Hash of everything except the step budget, so a run can be extended."""
        d = self.to_dict()
        d.pop("steps")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def build(self):
        """Instantiate schedule, family, dataset and an untrained model."""
        try:
            s = schedule_from_dict(self.schedule)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError("schedule", str(exc)) from exc
        try:
            fam = family_from_dict(self.family)
            fam.validate(s)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError("family", str(exc)) from exc
        try:
            ds = make_dataset(self.dataset)
        except (ValueError, KeyError, TypeError, OSError) as exc:
            raise ConfigError("dataset", str(exc)) from exc
        extra = set(self.model) - _MODEL_KEYS
        if extra:
            raise ConfigError(f"model.{sorted(extra)[0]}", "unknown key")
        init_seed, _, _ = stream_seeds(self.seed)
        try:
            net = Denoiser(ds.data_dim, self.model.get("hidden", [128, 128, 128]),
                           self.model.get("cond_mode", "timestep_embedding"), T=s.T,
                           n_freq=self.model.get("n_freq", 8), seed=init_seed)
        except (ValueError, TypeError) as exc:
            raise ConfigError("model", str(exc)) from exc
        return s, fam, ds, net


def stream_seeds(seed: int) -> tuple[int, np.random.SeedSequence, np.random.SeedSequence]:
    """Split the run seed into (init seed, data stream, diffusion stream)."""
    init, data, diff = np.random.SeedSequence(seed).spawn(3)
    return int(init.generate_state(1)[0]), data, diff


def _rng_state(rng: np.random.Generator) -> dict[str, Any]:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict[str, Any]) -> None:
    rng.bit_generator.state = state


@dataclass
class TrainResult:
    model: Denoiser
    adam: AdamState
    metrics: list[dict[str, Any]]
    stopped_early: bool = False
    checks: dict[str, Any] = field(default_factory=dict)


def conditioning(net: Denoiser, s, t: np.ndarray) -> np.ndarray:
    if net.cond_mode == "noise_level_scalar":
        return np.sqrt(s.alpha_bar[t - 1])
    return t.astype(np.float64)


def train_loop(cfg: TrainConfig, out_dir=None, resume=None,
               on_log: Callable[[dict[str, Any]], None] | None = None) -> TrainResult:
    """Run (or resume) training for ``cfg.steps`` total iterations.

    Args:
        out_dir: where ``metrics.jsonl`` and ``checkpoint.gdnm`` are written;
            nothing is written when None.
        resume: path of a checkpoint produced by an earlier run of the same
            config; only the step budget may differ.
    """
    s, fam, ds, net = cfg.build()
    _, data_ss, diff_ss = stream_seeds(cfg.seed)
    data_rng = np.random.Generator(np.random.PCG64(data_ss))
    diff_rng = np.random.Generator(np.random.PCG64(diff_ss))
    adam = AdamState.for_model(net, lr=cfg.lr)
    if resume is not None:
        ck = model_mod.load_checkpoint(resume)
        meta = ck.meta
        if meta.get("resume_hash") != cfg.resume_digest():
            raise ConfigError("resume", "checkpoint was written by a different config")
        if ck.adam is None:
            raise ConfigError("resume", "checkpoint carries no optimizer state")
        net, adam = ck.model, ck.adam
        _set_rng_state(data_rng, meta["rng"]["data"])
        _set_rng_state(diff_rng, meta["rng"]["diffusion"])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_f = None
    if out is not None:
        log_path = out / "metrics.jsonl"
        kept = []
        if resume is not None and log_path.exists():
            # drop records written after the checkpoint by an interrupted run
            kept = [ln for ln in log_path.read_text().splitlines()
                    if ln.strip() and json.loads(ln)["step"] <= adam.step]
        log_f = open(log_path, "w")
        log_f.writelines(ln + "\n" for ln in kept)

    def meta_now(step: int) -> dict[str, Any]:
        return {"config": cfg.to_dict(), "config_hash": cfg.digest(),
                "resume_hash": cfg.resume_digest(), "step": step,
                "schedule": s.to_dict(), "schedule_hash": s.digest(), "family": fam.to_dict(),
                "dataset": cfg.dataset, "data_shape": list(ds.data_shape), "data_kind": ds.kind,
                "rng": {"data": _rng_state(data_rng), "diffusion": _rng_state(diff_rng)}}

    metrics: list[dict[str, Any]] = []
    window: list[float] = []
    prev_avg = None
    stopped = False
    B = cfg.batch_size
    try:
        while adam.step < cfg.steps:
            step = adam.step + 1
            state_before = {"data": _rng_state(data_rng), "diffusion": _rng_state(diff_rng)}
            x0 = ds.sample(B, data_rng).reshape(B, -1)
            t = diff_rng.integers(1, s.T + 1, size=B)
            pair = closed_form_batch(x0, t, fam, s, diff_rng)
            loss, grads = net.loss_and_grad(pair.x_t, conditioning(net, s, t), pair.target)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                diag = {"step": step, "loss": loss, "t": t.tolist(), "rng_before": state_before}
                if out is not None:
                    (out / "diverged.json").write_text(json.dumps(diag))
                raise TrainingError(f"non-finite loss at step {step}", diag)
            adam_step(net, grads, adam)
            if step % cfg.log_interval == 0 or step == cfg.steps:
                rec = {"step": step, "loss": loss}
                metrics.append(rec)
                if log_f is not None:
                    log_f.write(json.dumps(rec) + "\n")
                if on_log is not None:
                    on_log(rec)
            if out is not None and (step % cfg.checkpoint_interval == 0 or step == cfg.steps):
                model_mod.save(net, out / "checkpoint.gdnm", meta=meta_now(step), adam=adam)
            if cfg.early_stop:
                window.append(loss)
                if len(window) == 500:
                    avg = sum(window) / 500.0
                    window.clear()
                    if prev_avg is not None and abs(prev_avg - avg) < 1e-3 * prev_avg:
                        stopped = True
                        if out is not None:
                            model_mod.save(net, out / "checkpoint.gdnm", meta=meta_now(step),
                                           adam=adam)
                        break
                    prev_avg = avg
    finally:
        if log_f is not None:
            log_f.close()
    return TrainResult(net, adam, metrics, stopped_early=stopped)
