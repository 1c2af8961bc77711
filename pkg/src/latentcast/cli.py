"""Command-line entry point: ``latentcast [global flags] <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import plotting
from .dataset import (
    GridField, SyntheticConfig, generate_synthetic, hours_since_epoch, latitude_weights, load_constants,
    load_dataset, normalize, save_dataset, split_field, synthetic_constants, utc,
)
from .errors import ConfigError, DataError, LatentcastError
from .evaluation import attribute, correlation_matrix, evaluate, model_forecast_fn
from .htami import HISTORY, build_plan, optimal_depth
from .model import ModelConfig
from .training import DataBundle, TrainConfig, fit, learning_rate, load_checkpoint

log = logging.getLogger("latentcast")

SPLITS = ("train", "val", "test", "all")


# --------------------------------------------------------------------------
# run directories


def open_run_dir(out_root, command: str, run_hash: str, force: bool) -> Path:
    """``<out>/<command>-<UTC timestamp>-<hash>``; an existing run with the same hash needs ``force``."""
    root = Path(out_root)
    existing = sorted(root.glob(f"{command}-*-{run_hash}")) if root.exists() else []
    if existing:
        if not force:
            raise ConfigError(f"run {existing[-1]} already exists for this configuration; use --force to overwrite")
        run = existing[-1]
        for f in run.rglob("*"):
            if f.is_file():
                f.unlink()
        return run
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    run = root / f"{command}-{stamp}-{run_hash}"
    run.mkdir(parents=True)
    return run


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, default=str) + "\n")
    return path


# --------------------------------------------------------------------------
# config -> library objects


def synthetic_config(cfg: dict) -> SyntheticConfig:
    return SyntheticConfig(**cfg["data"]["synthetic"], seed=cfg["seed"])


def model_config(cfg: dict, catalog, grid) -> ModelConfig:
    return ModelConfig(C=catalog.C, key_indices=catalog.key_indices, grid=tuple(grid), **cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=cfg["seed"])


def load_data(cfg: dict, path=None):
    """Dataset from ``path`` (or ``data.path``), else the configured synthetic record."""
    path = path or cfg["data"]["path"]
    if path is None:
        field_, cat = generate_synthetic(synthetic_config(cfg))
        return field_, cat, synthetic_constants(field_.lat, field_.lon)
    if not Path(path).exists():
        raise DataError(f"dataset not found: {path}")
    field_, cat = load_dataset(path)
    return field_, cat, load_constants(path)


def pick_split(field_: GridField, cfg: dict, which: str) -> GridField:
    if which == "all":
        return field_
    tr, va, te = split_field(field_, tuple(cfg["data"]["split"]))
    return {"train": tr, "val": va, "test": te}[which]


def schedule_summary(tc: TrainConfig) -> str:
    starts = ", ".join(f"{n} from epoch {b}" for n, b in zip(tc.curriculum, tc.boundaries[:-1]))
    lr = f"lr {learning_rate(0, tc):g} x{tc.lr_decay:g} every {tc.lr_decay_every} epochs"
    if tc.lr_decay_until < tc.epochs:
        lr += f", fixed from epoch {tc.lr_decay_until} at {learning_rate(tc.lr_decay_until, tc):g}"
    return (
        f"schedule: {tc.epochs} epochs; rollout iterations {list(tc.curriculum)} ({starts}); "
        f"{lr}; batch {tc.batch_size}; intervals {list(tc.intervals)}"
    )


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg) -> int:
    sc = synthetic_config(cfg)
    run = open_run_dir(cfg["out"], "synth", cfgmod.run_hash("synth", cfg), args.force)
    field_, cat = generate_synthetic(sc)
    const = synthetic_constants(field_.lat, field_.lon)
    out = save_dataset(field_, cat, run / "dataset", constants={"land_mask": const[0], "sin_lat": const[1]})
    _write_json(run / "config.json", cfg)
    print(f"dataset: {out} (T={field_.n_steps}, C={cat.C}, c={cat.c}, grid={field_.data.shape[2]}x{field_.data.shape[3]})")
    return 0


def cmd_train(args, cfg) -> int:
    tc = train_config(cfg)
    print(schedule_summary(tc))
    field_, cat, const = load_data(cfg, args.data)
    tr, va, _ = split_field(field_, tuple(cfg["data"]["split"]))
    data = DataBundle.from_fields(tr, cat, va if tc.val_batches else None, cfg["data"]["climatology"])
    mc = model_config(cfg, cat, field_.data.shape[2:])
    if args.resume:
        run = Path(args.resume).parent
    else:
        extra = {"data": str(Path(args.data).resolve()) if args.data else None}
        run = open_run_dir(cfg["out"], "train", cfgmod.run_hash("train", cfg, extra), args.force)
    _write_json(run / "config.json", cfg)

    def progress(rec):
        if rec["step"] % 25 == 0:
            log.info("step %d epoch %d T=%d loss %.4f", rec["step"], rec["epoch"], rec["T_train"], rec["loss_total"])

    ckpt = fit(data, mc, tc, run, constants=const, resume=args.resume, force=args.force, progress=progress)
    plotting.plot_training_log(run / "train_log.csv", run / f"train_loss.{cfg['evaluate']['plot_format']}")
    print(f"checkpoint: {ckpt}")
    return 0


def _history(z: np.ndarray, t: int) -> np.ndarray:
    return z[t - HISTORY + 1:t + 1]


def cmd_forecast(args, cfg) -> int:
    ck = load_checkpoint(args.checkpoint)
    field_, cat, _ = load_data(cfg, args.data)
    if cat.names != ck.catalog.names:
        raise DataError("dataset channels differ from the checkpoint catalog")
    steps = args.steps or cfg["forecast"]["steps"]
    init = args.init_time or cfg["forecast"]["init_time"]
    if init is None:
        test = pick_split(field_, cfg, "test")
        t = HISTORY - 1 + round((test.t0 - field_.t0).total_seconds() / 3600 / field_.dt_hours)
    else:
        off = (utc(init) - field_.t0).total_seconds() / 3600 / field_.dt_hours
        if off != int(off):
            raise DataError(f"init time {init} is not on the {field_.dt_hours} h grid of the dataset")
        t = int(off)
    if t < HISTORY - 1 or t >= field_.n_steps:
        raise DataError(f"init time needs {HISTORY} observed steps inside the record")
    extra = {"checkpoint": ck.config_hash, "t": t, "steps": steps, "data": str(args.data)}
    run = open_run_dir(cfg["out"], "forecast", cfgmod.run_hash("forecast", cfg, extra), args.force)
    model = ck.build_model()
    z = normalize(field_, ck.stats).data
    fn = model_forecast_fn(model, field_.dt_hours)
    pred = fn(_history(z, t)[None], np.array([hours_since_epoch(field_.time_at(t))]), steps)[0]
    key = list(cat.key_indices)
    pred = pred * ck.stats.std[key][:, None, None] + ck.stats.mean[key][:, None, None]
    out_cat = type(cat)([cat.names[i] for i in key], [cat.levels[i] for i in key], list(range(len(key))),
                        [cat.surface_flags[i] for i in key])
    out = GridField(pred.astype(np.float32), field_.lat, field_.lon, field_.time_at(t + 1), field_.dt_hours)
    save_dataset(out, out_cat, run / "forecast")
    _write_json(run / "forecast_meta.json", {"init_time": field_.time_at(t).isoformat(), "steps": steps,
                                             "checkpoint": str(args.checkpoint)})
    print(f"forecast: {run / 'forecast'} ({steps} steps from {field_.time_at(t).isoformat()})")
    return 0


def cmd_evaluate(args, cfg) -> int:
    ck = load_checkpoint(args.checkpoint)
    field_, cat, _ = load_data(cfg, args.data)
    if cat.names != ck.catalog.names:
        raise DataError("dataset channels differ from the checkpoint catalog")
    ev = cfg["evaluate"]
    horizon = args.horizon or ev["horizon"]
    test = pick_split(field_, cfg, args.split)
    extra = {"checkpoint": ck.config_hash, "split": args.split, "horizon": horizon, "data": str(args.data)}
    run = open_run_dir(cfg["out"], "evaluate", cfgmod.run_hash("evaluate", cfg, extra), args.force)
    model = ck.build_model()
    a = latitude_weights(test.lat)
    report = evaluate(model_forecast_fn(model, test.dt_hours), test, cat, ck.stats, ck.climatology, a,
                      horizon=horizon, init_hours=tuple(ev["init_hours"]), max_inits=ev["max_inits"],
                      metadata={"checkpoint": str(args.checkpoint), "split": args.split})
    report.to_csv(run / "metrics.csv")
    report.to_json(run / "summary.json")
    fmt = ev["plot_format"]
    plotting.plot_metric_curves(report, run, fmt)
    self_c, cross_c = correlation_matrix(test.data, cat)
    plotting.plot_correlation(self_c, cross_c, cat, run / f"correlation.{fmt}")
    print(f"evaluated {report.n_inits} inits x {horizon} leads -> {run / 'metrics.csv'}")
    for name, r, p in zip(report.variables, report.rmse[:, 0], report.persistence_rmse[:, 0]):
        print(f"  {name}: lead-1 rmse {r:.4g} (persistence {p:.4g})")
    return 0


def cmd_plan(args, cfg) -> int:
    n = args.n if args.n is not None else cfg["plan"]["n"]
    if n < 1:
        raise ConfigError(f"plan needs at least one lead step, got n={n}")
    plan = build_plan(n)
    dp = optimal_depth(n)
    run = open_run_dir(cfg["out"], "plan", cfgmod.run_hash("plan", cfg, {"n": n}), args.force)
    (run / "plan.json").write_text(plan.to_json() + "\n")
    print(plan.table())
    agrees = all(plan.depth[i] == dp[i] for i in range(1, n + 1))
    print(f"depth of target {n}: {plan.depth[n]}; max depth over targets 1..{n}: {plan.max_depth}; "
          f"dynamic-programming optimum {'matches' if agrees else 'DIFFERS'} at every target")
    return 0


def cmd_attribute(args, cfg) -> int:
    ck = load_checkpoint(args.checkpoint)
    field_, cat, _ = load_data(cfg, args.data)
    if cat.names != ck.catalog.names:
        raise DataError("dataset channels differ from the checkpoint catalog")
    at = cfg["attribute"]
    steps = args.steps or at["steps"]
    target = args.target or at["target"]
    when = args.time or at["sample_time"]
    if when is None:
        test = pick_split(field_, cfg, "test")
        t = round((test.t0 - field_.t0).total_seconds() / 3600 / field_.dt_hours) + 1
    else:
        t = int((utc(when) - field_.t0).total_seconds() / 3600 / field_.dt_hours)
    if not 1 <= t < field_.n_steps:
        raise DataError(f"sample time needs a previous step inside the record (index {t})")
    extra = {"checkpoint": ck.config_hash, "t": t, "steps": steps, "target": target, "data": str(args.data)}
    run = open_run_dir(cfg["out"], "attribute", cfgmod.run_hash("attribute", cfg, extra), args.force)
    model = ck.build_model()
    z = normalize(field_, ck.stats).data
    x = torch.from_numpy(np.ascontiguousarray(z[t - 1:t + 1], dtype=np.float32))
    names = cat.key_names if target == "key" else None
    res = attribute(model, x, hours_since_epoch(field_.time_at(t - 1)), hours_since_epoch(field_.time_at(t)),
                    target=target, steps=steps, names=names)
    with open(run / "attribution.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["target", *cat.names, "delta", "completeness_error"])
        for name, row, d, e in zip(res.target_names, res.magnitudes, res.delta, res.completeness_error):
            w.writerow([name, *(f"{v:.6g}" for v in row), f"{d:.6g}", f"{e:.3g}"])
    plotting.plot_attribution(res, cat.names, cat.key_indices, run / f"attribution.{cfg['evaluate']['plot_format']}")
    top = res.top_k(cat.names, at["top_k"])
    print(f"integrated gradients, m={steps}, sample {field_.time_at(t).isoformat()}")
    for name, err, tk in zip(res.target_names, res.completeness_error, top):
        picks = ", ".join(f"{n} (#{i})" for n, i, _ in tk)
        print(f"  {name}: completeness error {100 * err:.3f}%  top: {picks}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "forecast": cmd_forecast,
    "evaluate": cmd_evaluate, "plan": cmd_plan, "attribute": cmd_attribute,
}


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentcast", description="Latent-space key-variable weather forecaster.")
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--out", help="root directory for run outputs")
    p.add_argument("--seed", type=int, help="seed for data synthesis and training")
    p.add_argument("--profile", choices=cfgmod.PROFILES, default="desk", help="built-in defaults (default: desk)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run with the same configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="write the synthetic dataset")

    s = sub.add_parser("train", help="train a forecaster")
    s.add_argument("--data", help="dataset directory (default: data.path, else synthetic)")
    s.add_argument("--resume", help="checkpoint to continue from; output goes to its run directory")

    def with_ckpt(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", help="dataset directory (default: data.path, else synthetic)")
        return s

    s = with_ckpt("forecast", "roll a trained model forward from one init time")
    s.add_argument("--init-time", help="ISO-8601 init time (default: first test-split init)")
    s.add_argument("--steps", type=int)

    s = with_ckpt("evaluate", "RMSE/ACC against persistence on a data split")
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--horizon", type=int)

    s = sub.add_parser("plan", help="print the multi-interval forecast plan")
    s.add_argument("--n", type=int, help="number of lead steps")

    s = with_ckpt("attribute", "integrated-gradients attribution of inputs to key variables or latents")
    s.add_argument("--time", help="ISO-8601 time of the later input step")
    s.add_argument("--steps", type=int, help="quadrature points m")
    s.add_argument("--target", choices=("key", "latent"))
    return p


def flag_overrides(args) -> dict:
    o = {}
    if args.out is not None:
        o["out"] = args.out
    if args.seed is not None:
        o["seed"] = args.seed
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.resolve(args.profile, args.config, flag_overrides(args))
        for name, n in (("--steps", getattr(args, "steps", None)), ("--horizon", getattr(args, "horizon", None))):
            if n is not None and n < 1:
                raise ConfigError(f"{name} must be positive, got {n}")
        return COMMANDS[args.command](args, cfg)
    except LatentcastError as e:
        print(f"latentcast: error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError, RuntimeError) as e:
        print(f"latentcast: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
