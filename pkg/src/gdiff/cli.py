"""Command-line entry point: ``gdiff {train,sample,verify,fitcurve,dataset,inspect}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
3 a verification suite reported a failed check.

Every command that writes files also writes a run manifest next to its
outputs. The manifest is created when the command starts and rewritten with
the end time and status when it exits.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import os
import subprocess
import sys
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np

from . import model as model_mod
from .datasets import IDXFormatError, make_dataset, write_idx
from .experiments import CurveSpec, default_curve_spec, fitting_error_curve
from .export import atomic_write, image_grid, pgm_bytes, points_csv
from .noise import Gamma, family_from_dict
from .reverse import SamplerConfig, sample
from .schedule import schedule_from_dict, snr_stats, timestep_subsequence
from .train import ConfigError, TrainConfig, TrainingError, train_loop
from .verify import SUITES, all_passed

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def build_version() -> str:
    try:
        v = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        v = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            v += "+g" + rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return v


class RunManifest:
    """Reproducibility record for one command invocation."""

    def __init__(self, path, command: str, argv: list[str], seed: int | None,
                 config_hash: str | None, outputs: dict[str, str]):
        self.path = Path(path) if path is not None else None
        self.data: dict[str, Any] = {
            "command": command, "argv": argv, "seed": seed, "config_hash": config_hash,
            "version": build_version(), "outputs": outputs, "started_at": _now(),
            "finished_at": None, "status": "running", "exit_code": None, "details": {},
        }
        self._write()

    def _write(self) -> None:
        if self.path is not None:
            atomic_write(self.path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finalize(self, exit_code: int, **details) -> None:
        self.data["details"].update(details)
        self.data["exit_code"] = exit_code
        self.data["status"] = "ok" if exit_code == 0 else "failed"
        self.data["finished_at"] = _now()
        self._write()


def resolve_seed(arg_seed: int | None) -> int | None:
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get("GDIFF_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"GDIFF_SEED must be an integer, got {env!r}") from exc


def _read_json(path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def _manifest_path(args, default: Path | None) -> Path | None:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return default


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    raw = _read_json(args.config)
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    if "seed" not in raw:
        seed = resolve_seed(args.seed)
        if seed is not None:
            raw["seed"] = seed
    elif args.seed is not None and args.seed != raw["seed"]:
        raise UsageError("--seed conflicts with the seed in the config file")
    if args.steps is not None:
        raw["steps"] = args.steps
    cfg = TrainConfig.from_dict(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(_manifest_path(args, out / "manifest.json"), "train", args.argv,
                      cfg.seed, cfg.digest(),
                      {"checkpoint": str(out / "checkpoint.gdnm"),
                       "metrics": str(out / "metrics.jsonl")})
    atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    checks: dict[str, Any] = {}
    s, fam, _, _ = cfg.build()
    if isinstance(fam, Gamma):
        gp = fam.params(s)
        lhs = float(gp.k_bar[-1] * gp.theta_t[-1] ** 2)
        rhs = float(s.one_minus_alpha_bar[-1])
        rel = abs(lhs - rhs) / rhs
        checks["gamma_accumulated_variance"] = {
            "k_bar_T_theta_T_sq": lhs, "one_minus_alpha_bar_T": rhs, "rel_err": rel,
            "threshold": 1e-10, "pass": rel <= 1e-10}

    def log(rec):
        if not args.quiet:
            print(json.dumps(rec), flush=True)

    try:
        res = train_loop(cfg, out_dir=out, resume=args.resume, on_log=log)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        man.finalize(EXIT_RUNTIME, checks=checks, error=str(exc), diagnostics=exc.diagnostics)
        return EXIT_RUNTIME
    final = res.metrics[-1]["loss"] if res.metrics else None
    man.finalize(EXIT_OK, checks=checks, final_loss=final, steps=res.adam.step,
                 stopped_early=res.stopped_early, schedule_hash=s.digest())
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def _load_for_sampling(args):
    try:
        ck = model_mod.load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from exc
    meta = ck.meta
    for key in ("schedule", "schedule_hash", "family"):
        if key not in meta:
            raise UsageError(f"checkpoint carries no {key}; cannot sample")
    s = schedule_from_dict(meta["schedule"])
    if s.digest() != meta["schedule_hash"]:
        raise UsageError("schedule hash mismatch: checkpoint schedule does not match its recorded hash")
    if args.schedule is not None:
        other = schedule_from_dict(_read_json(args.schedule))
        if other.digest() != meta["schedule_hash"]:
            raise UsageError("schedule hash mismatch: --schedule differs from the checkpoint's")
    if ck.model.T != s.T:
        raise UsageError("schedule hash mismatch: model and schedule lengths differ")
    fam = family_from_dict(meta["family"])
    return ck, s, fam


def cmd_sample(args) -> int:
    seed = resolve_seed(args.seed)
    if seed is None:
        raise UsageError("a seed is required (--seed or GDIFF_SEED)")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ck, s, fam = _load_for_sampling(args)
    n_steps = args.steps or s.T
    if not 1 <= n_steps <= s.T:
        raise UsageError(f"--steps must be in [1, {s.T}]")
    steps = timestep_subsequence(s.T, n_steps)
    data_shape = tuple(ck.meta.get("data_shape", [ck.model.data_dim]))
    kind = ck.meta.get("data_kind", "points")
    clip = args.clip_x0 if args.clip_x0 is not None else kind == "image"
    try:
        cfg = SamplerConfig(kind=args.kind, eta=args.eta, steps=steps, clip_x0=clip)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    outputs = {"samples": str(out)}
    if args.trajectory:
        outputs["trajectory"] = args.trajectory
    man = RunManifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), "sample",
                      args.argv, seed, ck.meta.get("config_hash"), outputs)
    rng = np.random.default_rng(seed)
    record = steps if args.trajectory else None
    traj = sample(ck.model, fam, s, cfg, args.n, rng, data_shape=data_shape, record=record)
    x = traj.x0
    if not np.all(np.isfinite(x)):
        man.finalize(EXIT_RUNTIME, error="sampler produced non-finite values")
        return EXIT_RUNTIME
    if kind == "image":
        dataset = make_dataset(ck.meta["dataset"])
        atomic_write(out, pgm_bytes(image_grid(dataset.to_raw(x).reshape((-1,) + data_shape))))
    else:
        atomic_write(out, points_csv(x))
    if args.trajectory:
        atomic_write(args.trajectory, traj.to_jsonl())
    man.finalize(EXIT_OK, sampler={"kind": cfg.kind, "eta": cfg.eta, "clip_x0": cfg.clip_x0},
                 timesteps=steps, n=args.n, schedule_hash=s.digest(),
                 checkpoint_step=ck.meta.get("step"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    fn = SUITES[args.suite]
    kw: dict[str, Any] = {}
    if args.n is not None:
        if args.suite not in ("lemma1", "closed_form_ks", "variance_budget"):
            raise UsageError(f"--n does not apply to suite {args.suite}")
        kw["n"] = args.n
    seed = resolve_seed(args.seed)
    if seed is not None:
        if args.suite == "closed_form_ks":
            kw["seeds"] = tuple(range(seed, seed + 5))
        else:
            kw["seed"] = seed
    if args.families:
        if args.suite != "closed_form_ks":
            raise UsageError("--families only applies to closed_form_ks")
        kw["families"] = args.families.split(",")
    man = None
    if args.out:
        man = RunManifest(_manifest_path(args, Path(args.out + ".manifest.json")), "verify",
                          args.argv, seed, None, {"report": args.out})
    report = fn(**kw)
    text = json.dumps(report, indent=1) + "\n"
    if args.out:
        atomic_write(args.out, text)
    if not args.quiet:
        sys.stdout.write(text)
    failed = [c["check"] for c in report if not c["pass"]]
    n_ok = len(report) - len(failed)
    print(f"{args.suite}: {n_ok}/{len(report)} checks passed", file=sys.stderr)
    code = EXIT_OK if all_passed(report) else EXIT_VERIFY
    if man is not None:
        man.finalize(code, failed=failed)
    return code


# ---------------------------------------------------------------------------
# fitcurve


def cmd_fitcurve(args) -> int:
    over: dict[str, Any] = {}
    if args.schedule:
        over["schedule"] = _read_json(args.schedule)
    if args.family == "gamma":
        over["family"] = {"family": "gamma", "theta0": args.theta0}
    elif args.family == "gaussian":
        over["family"] = {"family": "gaussian"}
    else:
        over["family"] = {"family": "mixture", "p": 0.5,
                          "phi_schedule": {"mode": "by_timestep", "start": 1.0, "end": 0.5}}
    if args.t_list:
        over["t_list"] = args.t_list
    if args.fit:
        over["family_tags"] = args.fit.split(",")
    seed = resolve_seed(args.seed)
    spec = default_curve_spec(**over, repeats=args.repeats, bins=args.bins,
                              n_elements=args.n_elements, seed=seed if seed is not None else 0)
    _check_curve_spec(spec)
    out = Path(args.out)
    json_out = Path(args.json) if args.json else out.with_suffix(".json")
    man = RunManifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")),
                      "fitcurve", args.argv, spec.seed, None,
                      {"csv": str(out), "json": str(json_out)})
    res = fitting_error_curve(spec, threads=args.threads)
    atomic_write(out, res.to_csv())
    atomic_write(json_out, res.to_json())
    if not args.quiet:
        sys.stdout.write(res.to_csv())
    summary = [{"t": t, "gamma_wins": res.win_fraction(t), "gauss_over_gamma": res.mean_ratio(t)}
               for t in spec.t_list if {"gamma", "gaussian"} <= set(spec.family_tags)]
    man.finalize(EXIT_OK, spec=vars(spec), summary=summary,
                 gamma_k_bar={str(k): v for k, v in res.gamma_k_bar.items()})
    return EXIT_OK


def _check_curve_spec(spec: CurveSpec) -> None:
    for tag in spec.family_tags:
        if tag not in ("gaussian", "gamma", "mixture"):
            raise UsageError(f"unknown fit family {tag!r}")
    if spec.repeats < 1 or spec.bins < 10 or spec.n_elements < 100:
        raise UsageError("need repeats >= 1, bins >= 10 and n_elements >= 100")
    try:
        s = schedule_from_dict(spec.schedule)
        family_from_dict(spec.family).validate(s)
        for t in spec.t_list:
            s.check_t(t)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# dataset


def cmd_dataset(args) -> int:
    seed = resolve_seed(args.seed)
    if seed is None:
        raise UsageError("a seed is required (--seed or GDIFF_SEED)")
    spec = json.loads(args.spec) if args.spec.lstrip().startswith("{") else {"name": args.spec}
    try:
        ds = make_dataset(spec)
    except IDXFormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    man = RunManifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")),
                      "dataset", args.argv, seed, None, {"data": str(out)})
    x = ds.sample(args.n, np.random.default_rng(seed))
    fmt = args.format or ("pgm" if ds.kind == "image" else "csv")
    if fmt == "csv":
        atomic_write(out, points_csv(x))
    elif ds.kind != "image":
        raise UsageError(f"format {fmt} needs an image dataset")
    elif fmt == "pgm":
        atomic_write(out, pgm_bytes(image_grid(ds.to_raw(x))))
    else:
        atomic_write(out, write_idx(np.round(ds.to_raw(x) * 255.0)))
    man.finalize(EXIT_OK, dataset=spec, n=args.n, format=fmt)
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect


def _row(t: int, *vals) -> str:
    return ",".join([str(t)] + [repr(float(v)) for v in vals])


def _schedule_table(s, every: int) -> str:
    lines = ["t,beta,alpha_bar,mean_coeff,noise_std"]
    for t in range(1, s.T + 1):
        if t == 1 or t == s.T or t % every == 0:
            m, sd = snr_stats(s, t)
            lines.append(_row(t, s.beta[t - 1], s.alpha_bar[t - 1], m, sd))
    return "\n".join(lines) + "\n"


def _family_table(fam, s, every: int) -> str:
    rows = []
    ts = [t for t in range(1, s.T + 1) if t == 1 or t == s.T or t % every == 0]
    if fam.tag == "gamma":
        gp = fam.params(s)
        rows.append("t,k_t,theta_t,k_bar,k_bar_theta_sq,one_minus_alpha_bar")
        for t in ts:
            i = t - 1
            rows.append(_row(t, gp.k_t[i], gp.theta_t[i], gp.k_bar[i],
                             gp.k_bar[i] * gp.theta_t[i] ** 2, s.one_minus_alpha_bar[i]))
    elif fam.tag == "mixture":
        rows.append("t,phi,m1,m2,p")
        for t in ts:
            mp = fam.params_at(s, t)
            rows.append(_row(t, mp.phi, mp.m1, mp.m2, mp.p))
    else:
        rows.append("t,noise_std")
        rows += [_row(t, math.sqrt(s.one_minus_alpha_bar[t - 1])) for t in ts]
    return "\n".join(rows) + "\n"


def cmd_inspect(args) -> int:
    if args.what == "checkpoint":
        if not args.path:
            raise UsageError("inspect checkpoint needs a path")
        ck = model_mod.load_checkpoint(args.path)
        meta = dict(ck.meta)
        meta.pop("rng", None)
        info = {"arch": ck.header["arch"], "n_params": ck.header["n_params"],
                "has_optimizer_state": ck.adam is not None, "meta": meta,
                "sha256": hashlib.sha256(Path(args.path).read_bytes()).hexdigest()}
        sys.stdout.write(json.dumps(info, indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    # A bare schedule, or a training config carrying one.
    d = _read_json(args.path) if args.path else \
        {"type": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02}
    cfg_fam = None
    if isinstance(d, dict) and "seed" in d:
        # a training config: resolve defaults exactly as training would
        cfg = TrainConfig.from_dict(d)
        sched_d, cfg_fam = cfg.schedule, cfg.family
    else:
        sched_d = d
    try:
        s = schedule_from_dict(sched_d)
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise UsageError(f"bad schedule: {exc}") from exc
    if args.what == "schedule":
        sys.stdout.write(_schedule_table(s, args.every))
        return EXIT_OK
    if args.family:
        fam_d = json.loads(args.family)
    elif cfg_fam is not None:
        fam_d = cfg_fam
    else:
        fam_d = {"family": "gamma", "theta0": 0.001}
    try:
        fam = family_from_dict(fam_d)
        fam.validate(s)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad family: {exc}") from exc
    sys.stdout.write(_family_table(fam, s, args.every))
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gdiff", description="Diffusion models with Gaussian, mixture and Gamma noise.")
    p.add_argument("--threads", type=int, default=1, help="worker pool size cap")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="falls back to $GDIFF_SEED")
        sp.add_argument("--manifest", default=None, help="manifest path override")
        sp.add_argument("--quiet", action="store_true")

    tr = sub.add_parser("train", help="train a denoiser from a JSON config")
    tr.add_argument("config")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--resume", default=None, help="checkpoint to resume from")
    tr.add_argument("--steps", type=int, default=None, help="override total steps")
    common(tr)

    sa = sub.add_parser("sample", help="draw samples from a trained checkpoint")
    sa.add_argument("checkpoint")
    sa.add_argument("--kind", choices=["ddpm", "ddim"], default="ddpm")
    sa.add_argument("--steps", type=int, default=None, help="number of reverse steps (default T)")
    sa.add_argument("--eta", type=float, default=0.0)
    sa.add_argument("--n", type=int, default=1000)
    sa.add_argument("--out", required=True)
    sa.add_argument("--trajectory", default=None, help="also write the trajectory as JSON lines")
    sa.add_argument("--schedule", default=None, help="expected schedule JSON; hash must match")
    sa.add_argument("--clip-x0", dest="clip_x0", action="store_true", default=None)
    sa.add_argument("--no-clip-x0", dest="clip_x0", action="store_false")
    common(sa)

    ve = sub.add_parser("verify", help="run a self-check suite")
    ve.add_argument("suite", choices=sorted(SUITES))
    ve.add_argument("--n", type=int, default=None, help="Monte Carlo sample size")
    ve.add_argument("--families", default=None, help="comma list for closed_form_ks")
    ve.add_argument("--out", default=None, help="write the JSON report here")
    common(ve)

    fc = sub.add_parser("fitcurve", help="fitting error of Gaussian/Gamma densities vs. t")
    fc.add_argument("--family", choices=["gamma", "gaussian", "mixture"], default="gamma",
                    help="noise family of the forward chain")
    fc.add_argument("--theta0", type=float, default=default_curve_spec().family["theta0"])
    fc.add_argument("--t-list", dest="t_list", type=_int_list, default=None)
    fc.add_argument("--fit", default=None, help="comma list of fitted families")
    fc.add_argument("--repeats", type=int, default=100)
    fc.add_argument("--bins", type=int, default=200)
    fc.add_argument("--n-elements", dest="n_elements", type=int, default=4096)
    fc.add_argument("--schedule", default=None, help="schedule JSON file")
    fc.add_argument("--out", required=True, help="CSV path")
    fc.add_argument("--json", default=None, help="JSON curve path (default: CSV path with .json)")
    common(fc)

    da = sub.add_parser("dataset", help="generate and export dataset samples")
    da.add_argument("spec", help='dataset name or JSON spec, e.g. \'{"name":"ring8"}\'')
    da.add_argument("--n", type=int, default=1000)
    da.add_argument("--out", required=True)
    da.add_argument("--format", choices=["csv", "pgm", "idx"], default=None)
    common(da)

    ins = sub.add_parser("inspect", help="print schedule, family or checkpoint tables")
    ins.add_argument("what", choices=["schedule", "family", "checkpoint"])
    ins.add_argument("path", nargs="?", default=None,
                     help="schedule/config JSON, or a checkpoint for 'checkpoint'")
    ins.add_argument("--family", default=None, help="family JSON for 'family'")
    ins.add_argument("--every", type=int, default=100, help="row stride")
    return p


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "verify": cmd_verify,
            "fitcurve": cmd_fitcurve, "dataset": cmd_dataset, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = list(argv) if argv is not None else sys.argv[1:]
    if args.threads < 1:
        print("gdiff: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "every", 1) < 1:
        print("gdiff: error: --every must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.cmd](args)
    except ConfigError as exc:
        print(f"gdiff: config error in field '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"gdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (model_mod.CheckpointFormatError, IDXFormatError) as exc:
        print(f"gdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"gdiff: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
