"""Command-line experiment driver.

Subcommands: generate, neighbors, train, eval, lyapunov, sweep.  Every
value can come from a JSON config file (--config); explicit flags override
it, and the fully resolved configuration is written into the output
directory as config.resolved.json so any run can be reproduced from its
own artifacts.  Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import systems
from .cover import build_cover, calibrate_radii, load_cover, save_cover
from .errors import ConfigError, NbodeError
from .evaluate import (
    EvalConfig,
    EvalReport,
    GroundTruthModel,
    attractor_mmd_baseline,
    attractor_mmd_curve,
    hyperparam_sweep,
    lyapunov_mae,
    nrmse_vpt,
    relative_errors,
    sinkhorn_score,
    sweep_rows_to_csv,
    write_report,
)
from .integrate import StepControl, lyapunov_spectrum
from .model import load_model, save_model
from .train import KernelConfig, TrainConfig, log_rows_to_csv, train


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _resolve(args, config, defaults, section):
    """defaults <- flat config keys <- config[section] <- explicit CLI flags."""
    out = dict(defaults)
    for source in (config, config.get(section, {})):
        if not isinstance(source, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key in defaults:
            if key in source:
                out[key] = source[key]
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _write_resolved(resolved, directory, section):
    """Merge this command's resolved settings into config.resolved.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.resolved.json"
    merged = {}
    if path.exists():
        try:
            with open(path) as fh:
                merged = json.load(fh)
        except (OSError, json.JSONDecodeError):
            merged = {}
    merged[section] = resolved
    with open(path, "w") as fh:
        json.dump(merged, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_thread_cap(n_threads):
    if n_threads is None:
        env = os.environ.get("NBODE_THREADS")
        n_threads = int(env) if env else None
    if n_threads is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(n_threads))
    except ImportError:  # pragma: no cover
        print("threadpoolctl unavailable; thread cap ignored", file=sys.stderr)


def _system_spec(name):
    try:
        return systems.from_name(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_generate(args) -> int:
    resolved = _resolve(args, _load_config(args.config), {
        "system": "lorenz63", "noise_std": 0.1, "seed": 1,
        "n_traj": 50, "n_time": 1000,
        "timescale_traj": 8, "timescale_horizon": 100.0,
        "out": "data",
    }, "generate")
    spec = _system_spec(resolved["system"])
    out = Path(resolved["out"])
    existing = [s for s in ds_mod.SPLITS if (out / s / "meta.json").exists()]
    if existing and not args.force:
        raise ConfigError(
            f"output {out} already holds splits {existing}; use --force to overwrite"
        )
    splits = ds_mod.generate_splits(
        spec, float(resolved["noise_std"]), int(resolved["seed"]),
        n_traj=int(resolved["n_traj"]), n_time=int(resolved["n_time"]),
        timescale_traj=int(resolved["timescale_traj"]),
        timescale_horizon=float(resolved["timescale_horizon"]),
    )
    for split, ds in splits.items():
        ds_mod.save_dataset(ds, out / split)
    _write_resolved(resolved, out, "generate")
    print(f"wrote train/val/test to {out} "
          f"(tau={splits['train'].tau!r}, dt={splits['train'].dt!r})")
    return 0


def cmd_neighbors(args) -> int:
    resolved = _resolve(args, _load_config(args.config), {
        "data": None, "noise_std": None, "multiplier": 8.0,
        "target_frac": 0.05, "horizon": 10, "seed": 0,
    }, "neighbors")
    if resolved["data"] is None:
        raise ConfigError("neighbors requires --data pointing at a train split")
    data_dir = Path(resolved["data"])
    if not (data_dir / "meta.json").exists():
        raise ConfigError(f"no dataset at {data_dir}")
    ds = ds_mod.load_dataset(data_dir)
    noise = resolved["noise_std"]
    noise = ds.noise_std if noise is None else float(noise)
    r_min, r_max = calibrate_radii(
        ds.states.reshape(-1, ds.dim), noise,
        target_frac=float(resolved["target_frac"]),
        multiplier=float(resolved["multiplier"]), seed=int(resolved["seed"]))
    cover = build_cover(ds, (r_min, r_max), int(resolved["horizon"]))
    save_cover(cover, data_dir)
    resolved["noise_std"] = noise
    _write_resolved(resolved, data_dir, "neighbors")
    stats = cover.stats()
    n_total = ds.n_traj * ds.n_time
    print(f"r_min={r_min!r} r_max={r_max!r} centers={stats['n_centers']} "
          f"mean_occupancy={stats['mean_count'] / n_total!r}")
    return 0


_TRAIN_DEFAULTS = {
    "data": None, "run": None, "method": "neighborhood",
    "n_neighbors": 16, "nbhd_weight": 10.0, "rollout_steps": 10,
    "batch_size": 2048, "learning_rate": 2e-3, "n_steps": 5000,
    "val_every": 100, "seed": 0, "n_sub": 2, "taylor_order": 2,
    "hidden": [64, 64], "threads": None,
}


def _train_config_from(resolved) -> TrainConfig:
    weight = float(resolved["nbhd_weight"])
    if resolved["method"] == "vanilla":
        weight = 0.0
    elif resolved["method"] != "neighborhood":
        raise ConfigError(f"unknown method {resolved['method']!r}")
    return TrainConfig(
        rollout_steps=int(resolved["rollout_steps"]),
        batch_size=int(resolved["batch_size"]),
        n_neighbors=int(resolved["n_neighbors"]),
        nbhd_weight=weight,
        learning_rate=float(resolved["learning_rate"]),
        n_steps=int(resolved["n_steps"]),
        val_every=int(resolved["val_every"]),
        seed=int(resolved["seed"]),
        n_sub=int(resolved["n_sub"]),
        taylor_order=int(resolved["taylor_order"]),
        hidden=tuple(int(h) for h in resolved["hidden"]),
        kernel=KernelConfig(),
    )


def _load_split(data_root, split):
    path = Path(data_root) / split
    if not (path / "meta.json").exists():
        raise ConfigError(f"missing {split} split under {data_root}")
    return ds_mod.load_dataset(path)


def cmd_train(args) -> int:
    resolved = _resolve(args, _load_config(args.config), _TRAIN_DEFAULTS, "train")
    if resolved["data"] is None or resolved["run"] is None:
        raise ConfigError("train requires --data and --run")
    run_dir = Path(resolved["run"])
    if (run_dir / "model.json").exists() and not args.force:
        raise ConfigError(f"run {run_dir} already exists; use --force to overwrite")
    train_ds = _load_split(resolved["data"], "train")
    val_ds = _load_split(resolved["data"], "val")
    cfg = _train_config_from(resolved)
    cover = None
    if cfg.nbhd_weight > 0:
        cover_dir = Path(resolved["data"]) / "train"
        if not (cover_dir / "cover.bin").exists():
            raise ConfigError(
                f"no cover cache under {cover_dir}; run `nbode neighbors` first"
            )
        cover = load_cover(cover_dir)
    _write_resolved(resolved, run_dir, "train")
    model, rows, elapsed_ms = train(train_ds, cover, cfg, val_ds)
    save_model(model, run_dir)
    (run_dir / "train_log.csv").write_text(log_rows_to_csv(rows))
    print(f"best step {model.step} val_loss {model.val_loss!r} "
          f"({elapsed_ms} ms)", file=sys.stderr)
    return 0


def _eval_config_from(resolved, spec, transform) -> EvalConfig:
    lambda1 = resolved["lambda1"]
    if lambda1 is None:
        truth = GroundTruthModel(spec, transform)
        ic = transform.apply(
            ds_mod.sample_on_attractor(spec, 1, int(resolved["seed"])))[0]
        res = lyapunov_spectrum(truth.field, truth.jacobian, ic,
                                float(resolved["lambda1_horizon"]), 1.0)
        lambda1 = float(res.exponents[0])
    return EvalConfig(
        lambda1=float(lambda1),
        vpt_threshold=float(resolved["vpt_threshold"]),
        attractor_samples=int(resolved["attractor_samples"]),
        lyapunov_horizon=float(resolved["lyapunov_horizon"]),
        mmd_times=int(resolved["mmd_times"]),
        sinkhorn_epsilon=resolved["sinkhorn_epsilon"],
        sinkhorn_max_iter=int(resolved["sinkhorn_max_iter"]),
    )


_EVAL_DEFAULTS = {
    "data": None, "run": None, "seed": 0, "lambda1": None,
    "lambda1_horizon": 200.0, "vpt_threshold": 0.3, "attractor_samples": 5000,
    "lyapunov_horizon": 100.0, "mmd_times": 101, "sinkhorn_epsilon": None,
    "sinkhorn_max_iter": 2000, "skip_lyapunov": False, "skip_mmd": False,
    "lyapunov_ics": 10, "lyapunov_T": 300.0, "threads": None,
}


def cmd_eval(args) -> int:
    resolved = _resolve(args, _load_config(args.config), _EVAL_DEFAULTS, "eval")
    if resolved["data"] is None or resolved["run"] is None:
        raise ConfigError("eval requires --data and --run")
    run_dir = Path(resolved["run"])
    test_ds = _load_split(resolved["data"], "test")
    val_ds = _load_split(resolved["data"], "val")
    if test_ds.clean_states is None or val_ds.clean_states is None:
        raise ConfigError("evaluation requires datasets with clean states")
    spec = _system_spec(test_ds.system)
    model = load_model(run_dir)
    cfg = _eval_config_from(resolved, spec, test_ds.transform)
    resolved["lambda1"] = cfg.lambda1
    _write_resolved(resolved, run_dir, "eval")

    nrmse, vpt, vpt_mean, diverged = nrmse_vpt(model, test_ds, cfg)
    vf_err, jac_err, _ = relative_errors(
        model, spec, test_ds.transform, test_ds.clean_states)
    if resolved["skip_mmd"]:
        tbar, curve, plateau, baseline = [], [], float("nan"), float("nan")
    else:
        tbar, curve, plateau = attractor_mmd_curve(
            model, spec, test_ds.transform, cfg, seed=int(resolved["seed"]))
        baseline = attractor_mmd_baseline(spec, test_ds.transform, cfg)
    if resolved["skip_lyapunov"]:
        mae = lam_model = lam_truth = None
    else:
        ics = test_ds.clean_states[: int(resolved["lyapunov_ics"]), 0, :]
        mae, lam_model, lam_truth = lyapunov_mae(
            model, spec, test_ds.transform, ics, float(resolved["lyapunov_T"]))
        lam_model, lam_truth = lam_model.tolist(), lam_truth.tolist()
    score, converged = sinkhorn_score(model, val_ds, cfg)

    finite_nrmse = np.where(np.isfinite(nrmse), nrmse, np.nan)
    with np.errstate(invalid="ignore"):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            nrmse_mean = np.nanmean(finite_nrmse, axis=0)
    report = EvalReport(
        vpt_mean=vpt_mean, vpt_per_traj=vpt.tolist(),
        nrmse_mean=nrmse_mean.tolist(),
        mmd_times=list(tbar), mmd_curve=list(curve), mmd_plateau=plateau,
        baseline_mmd2=baseline, rel_vf_errors=vf_err.tolist(),
        rel_jac_errors=jac_err.tolist(), lyapunov_mae=mae,
        model_lyapunov=lam_model, truth_lyapunov=lam_truth,
        sinkhorn_score=score, sinkhorn_converged=converged, diverged=diverged,
    )
    write_report(report, run_dir)
    print(f"VPT {vpt_mean!r}  MMD2 plateau {plateau!r} (baseline {baseline!r})  "
          f"median jac err {float(np.median(jac_err))!r}")
    return 0


def cmd_lyapunov(args) -> int:
    resolved = _resolve(args, _load_config(args.config), {
        "data": None, "run": None, "out": None, "seed": 0,
        "horizon": 1000.0, "reorth_dt": 1.0, "n_ics": 10, "threads": None,
    }, "lyapunov")
    if resolved["data"] is None:
        raise ConfigError("lyapunov requires --data")
    test_ds = _load_split(resolved["data"], "test")
    if test_ds.clean_states is None:
        raise ConfigError("lyapunov evaluation requires clean states")
    spec = _system_spec(test_ds.system)
    ics = test_ds.clean_states[: int(resolved["n_ics"]), 0, :]
    out_dir = Path(resolved["out"] or resolved["run"] or resolved["data"])
    if resolved["run"] is not None:
        model = load_model(Path(resolved["run"]))
        mae, lam_model, lam_truth = lyapunov_mae(
            model, spec, test_ds.transform, ics,
            float(resolved["horizon"]), float(resolved["reorth_dt"]))
    else:
        truth = GroundTruthModel(spec, test_ds.transform)
        spectra = [lyapunov_spectrum(truth.field, truth.jacobian, ic,
                                     float(resolved["horizon"]),
                                     float(resolved["reorth_dt"])).exponents
                   for ic in ics]
        lam_truth = np.mean(spectra, axis=0)
        lam_model, mae = None, None
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(resolved, out_dir, "lyapunov")
    with open(out_dir / "lyapunov.csv", "w") as fh:
        fh.write("rank,model,truth\n")
        for r in range(len(lam_truth)):
            mv = "" if lam_model is None else repr(float(lam_model[r]))
            fh.write(f"{r + 1},{mv},{float(lam_truth[r])!r}\n")
    print(f"truth spectrum {np.round(lam_truth, 4).tolist()}"
          + (f"  model MAE {mae!r}" if mae is not None else ""))
    return 0


def cmd_sweep(args) -> int:
    resolved = _resolve(args, _load_config(args.config), {
        **_TRAIN_DEFAULTS,
        "grid_k": [8, 16, 32, 64], "grid_lambda": [1.0, 10.0, 100.0, 1000.0],
        "lambda1": None, "lambda1_horizon": 200.0,
        "sinkhorn_epsilon": None, "sinkhorn_max_iter": 2000,
    }, "sweep")
    if resolved["data"] is None or resolved["run"] is None:
        raise ConfigError("sweep requires --data and --run")
    run_dir = Path(resolved["run"])
    train_ds = _load_split(resolved["data"], "train")
    val_ds = _load_split(resolved["data"], "val")
    if val_ds.clean_states is None:
        raise ConfigError("sweep scoring requires clean validation states")
    cover_dir = Path(resolved["data"]) / "train"
    if not (cover_dir / "cover.bin").exists():
        raise ConfigError(f"no cover cache under {cover_dir}")
    cover = load_cover(cover_dir)
    spec = _system_spec(train_ds.system)
    resolved["method"] = "neighborhood"
    base_cfg = _train_config_from(resolved)
    eval_resolved = {"lambda1": resolved["lambda1"],
                     "lambda1_horizon": resolved["lambda1_horizon"],
                     "seed": resolved["seed"], "vpt_threshold": 0.3,
                     "attractor_samples": 1000, "lyapunov_horizon": 100.0,
                     "mmd_times": 101,
                     "sinkhorn_epsilon": resolved["sinkhorn_epsilon"],
                     "sinkhorn_max_iter": resolved["sinkhorn_max_iter"]}
    eval_cfg = _eval_config_from(eval_resolved, spec, train_ds.transform)
    resolved["lambda1"] = eval_cfg.lambda1
    _write_resolved(resolved, run_dir, "sweep")
    best, rows = hyperparam_sweep(
        train_ds, val_ds, cover, base_cfg, eval_cfg,
        neighbor_grid=tuple(int(k) for k in resolved["grid_k"]),
        weight_grid=tuple(float(v) for v in resolved["grid_lambda"]))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "sweep.csv").write_text(sweep_rows_to_csv(rows))
    with open(run_dir / "selected.json", "w") as fh:
        json.dump({"K": best[0], "lambda": best[1]}, fh)
        fh.write("\n")
    print(f"selected K={best[0]} lambda={best[1]!r}")
    return 0


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def _float_list(text):
    return [float(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nbode", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate train/val/test datasets")
    g.add_argument("--config")
    g.add_argument("--system")
    g.add_argument("--noise", dest="noise_std", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--n-traj", dest="n_traj", type=int)
    g.add_argument("--n-time", dest="n_time", type=int)
    g.add_argument("--timescale-traj", dest="timescale_traj", type=int)
    g.add_argument("--timescale-horizon", dest="timescale_horizon", type=float)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate)

    n = sub.add_parser("neighbors", help="calibrate radii and cache the cover")
    n.add_argument("--config")
    n.add_argument("--data")
    n.add_argument("--noise-std", dest="noise_std", type=float)
    n.add_argument("--multiplier", type=float)
    n.add_argument("--target-frac", dest="target_frac", type=float)
    n.add_argument("--horizon", type=int)
    n.add_argument("--seed", type=int)
    n.set_defaults(fn=cmd_neighbors)

    t = sub.add_parser("train", help="train a surrogate model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--run")
    t.add_argument("--method", choices=["vanilla", "neighborhood"])
    t.add_argument("--neighbors", dest="n_neighbors", type=int)
    t.add_argument("--lambda", dest="nbhd_weight", type=float)
    t.add_argument("--rollout-steps", dest="rollout_steps", type=int)
    t.add_argument("--batch", dest="batch_size", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--steps", dest="n_steps", type=int)
    t.add_argument("--val-every", dest="val_every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--n-sub", dest="n_sub", type=int)
    t.add_argument("--taylor-order", dest="taylor_order", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model")
    e.add_argument("--config")
    e.add_argument("--data")
    e.add_argument("--run")
    e.add_argument("--seed", type=int)
    e.add_argument("--lambda1", type=float)
    e.add_argument("--lambda1-horizon", dest="lambda1_horizon", type=float)
    e.add_argument("--vpt-threshold", dest="vpt_threshold", type=float)
    e.add_argument("--samples", dest="attractor_samples", type=int)
    e.add_argument("--mmd-times", dest="mmd_times", type=int)
    e.add_argument("--lyapunov-ics", dest="lyapunov_ics", type=int)
    e.add_argument("--lyapunov-T", dest="lyapunov_T", type=float)
    e.add_argument("--skip-lyapunov", dest="skip_lyapunov", action="store_const",
                   const=True)
    e.add_argument("--skip-mmd", dest="skip_mmd", action="store_const", const=True)
    e.add_argument("--threads", type=int)
    e.set_defaults(fn=cmd_eval)

    l = sub.add_parser("lyapunov", help="Lyapunov spectra for truth and model")
    l.add_argument("--config")
    l.add_argument("--data")
    l.add_argument("--run")
    l.add_argument("--out")
    l.add_argument("--horizon", type=float)
    l.add_argument("--reorth", dest="reorth_dt", type=float)
    l.add_argument("--ics", dest="n_ics", type=int)
    l.add_argument("--seed", type=int)
    l.add_argument("--threads", type=int)
    l.set_defaults(fn=cmd_lyapunov)

    s = sub.add_parser("sweep", help="hyperparameter grid search")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--run")
    s.add_argument("--grid-k", dest="grid_k", type=_int_list)
    s.add_argument("--grid-lambda", dest="grid_lambda", type=_float_list)
    s.add_argument("--steps", dest="n_steps", type=int)
    s.add_argument("--batch", dest="batch_size", type=int)
    s.add_argument("--rollout-steps", dest="rollout_steps", type=int)
    s.add_argument("--val-every", dest="val_every", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lambda1", type=float)
    s.add_argument("--threads", type=int)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    _apply_thread_cap(getattr(args, "threads", None))
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NbodeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
