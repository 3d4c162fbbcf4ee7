"""Command-line entry point: ``flowsr <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Flags may also come from ``--config file.json`` (keys are flag names with
underscores); explicit flags win.  ``MFSR_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .autodiff import NonFiniteError
from .baselines import DiscreteSRConfig, discrete_sr_baseline, train_discrete, trilinear_upsample
from .context import UNetConfig
from .data import DatasetFormatError, load_dataset, load_field, make_dataset, save_dataset, save_field
from .evaluation import table_csv
from .pipeline import (covered_extents, desk_discrete_configs, desk_train_config, evaluate_prediction, gamma_sweep,
                       noise_eval, scale_bench)
from .solver import CFLError, SimConfig, simulate_rb
from .training import (CheckpointFormatError, LossConfig, TrainConfig, load_checkpoint,
                       WorkerError, save_checkpoint, train, write_loss_csv)

log = logging.getLogger("flowsr")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(v) for v in str(text).split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers T,Z,X")
    return tuple(parts)


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _add_common(p):
    p.add_argument("--config", help="JSON file with flag values (flags override)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def _add_train_flags(p):
    p.add_argument("--dataset")
    p.add_argument("--gamma", type=float)
    p.add_argument("--pred-norm", choices=["l1", "l2", "huber"])
    p.add_argument("--workers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--samples-per-epoch", type=int)
    p.add_argument("--points", type=int, help="query points per window")
    p.add_argument("--batch-windows", type=int)
    p.add_argument("--window", type=_triple, help="LR training window T,Z,X (default: whole LR field)")
    p.add_argument("--preset", choices=["desk", "full"],
                   help="desk: minutes-scale budget (default); full: full-size per-epoch sample count")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="flowsr", description="Continuous space-time super-resolution of convection data")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="run the convection solver and write a dataset file")
    _add_common(p)
    for name, typ in (("--ra", float), ("--pr", float), ("--nx", int), ("--nz", int),
                      ("--t-final", float), ("--dt", float), ("--snapshot-every", int),
                      ("--frames", int), ("--d-s", int), ("--d-t", int)):
        p.add_argument(name, type=typ)

    p = sub.add_parser("downsample", help="re-derive the LR field of a dataset with new factors")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--d-s", type=int)
    p.add_argument("--d-t", type=int)

    p = sub.add_parser("train", help="train the continuous model")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--loss-csv")

    p = sub.add_parser("infer", help="super-resolve a dataset's LR field")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--target-res", type=_triple)

    p = sub.add_parser("evaluate", help="score a predicted field against the dataset's HR field")
    _add_common(p)
    p.add_argument("--pred")
    p.add_argument("--dataset")

    p = sub.add_parser("gamma-sweep", help="train and score one model per equation-loss weight")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--gammas", type=_floats)

    p = sub.add_parser("noise-eval", help="score a checkpoint on noise-corrupted LR input")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")

    p = sub.add_parser("scale-bench", help="data-parallel throughput for 1..k workers")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("baseline", help="trilinear or discrete-decoder reconstruction")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--kind", choices=["trilinear", "discrete"])
    return ap


DEFAULTS = {
    "seed": 0, "ra": 1e5, "pr": 1.0, "nx": 128, "nz": 32, "t_final": 50.0, "dt": 0.01,
    "snapshot_every": 50, "frames": 64, "d_s": 8, "d_t": 4, "gamma": 0.05, "pred_norm": "l1",
    "workers": 1, "epochs": 100, "lr": 1e-2, "preset": "desk", "gammas": [0.0, 0.05, 1.0],
    "steps": 5, "kind": "trilinear",
}


def resolve(args: argparse.Namespace) -> dict:
    """Flags over config-file values over built-in defaults."""
    given = {k: v for k, v in vars(args).items() if v is not None}
    merged = {}
    if "config" in given:
        try:
            cfg = json.loads(Path(given["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        known = set(vars(args))
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for key in ("window", "target_res"):
            if key in cfg and cfg[key] is not None:
                cfg[key] = tuple(cfg[key])
        merged.update(cfg)
    merged.update(given)
    merged["explicit"] = sorted(set(merged) - {"command"})
    for k, v in DEFAULTS.items():
        if k in vars(args):
            merged.setdefault(k, v)
    return merged


def _need(opts: dict, *keys):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _overrides(opts: dict, only_explicit: bool = False) -> dict:
    """TrainConfig keyword overrides from resolved options (optionally only user-given ones)."""
    pairs = (("epochs", "epochs"), ("lr", "lr"), ("seed", "seed"), ("workers", "n_workers"),
             ("samples_per_epoch", "samples_per_epoch"), ("points", "points_per_window"),
             ("batch_windows", "batch_windows"), ("window", "lr_window"))
    keep = set(opts["explicit"]) | {"seed"} if only_explicit else set(opts)
    return {key: opts[flag] for flag, key in pairs if flag in keep and opts.get(flag) is not None}


def _train_configs(opts: dict, ds) -> tuple[TrainConfig, LossConfig]:
    over = _overrides(opts)
    if opts["preset"] == "desk":
        cfg = desk_train_config(ds, **over)
    else:
        over.setdefault("lr_window", TrainConfig().lr_window)
        cfg = TrainConfig(upscale=(ds.d_t, ds.d_s, ds.d_s), **over)
    return cfg, LossConfig(gamma=opts["gamma"], pred_norm=opts["pred_norm"])


def _write_report_table(reports, label, out):
    text = table_csv(reports, label)
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def run(opts: dict) -> int:
    cmd = opts["command"]
    log.info("resolved config: %s", json.dumps({k: v for k, v in opts.items()}, default=str, sort_keys=True))

    if cmd == "simulate":
        _need(opts, "out")
        sim = SimConfig(Ra=opts["ra"], Pr=opts["pr"], nx=opts["nx"], nz=opts["nz"],
                        t_final=opts["t_final"], dt=opts["dt"], snapshot_every=opts["snapshot_every"],
                        n_frames=opts["frames"], seed=opts["seed"])
        ds = make_dataset(simulate_rb(sim), d_s=opts["d_s"], d_t=opts["d_t"])
        save_dataset(ds, opts["out"])
        log.info("wrote %s: HR %s, LR %s", opts["out"], ds.hr.data.shape, ds.lr.data.shape)
        return 0

    if cmd == "downsample":
        _need(opts, "dataset", "out")
        ds = load_dataset(opts["dataset"])
        new = make_dataset(ds.hr, d_s=opts["d_s"], d_t=opts["d_t"], Ra=ds.Ra, Pr=ds.Pr, seed=ds.seed)
        new.provenance = dict(ds.provenance, d_s=opts["d_s"], d_t=opts["d_t"])
        save_dataset(new, opts["out"])
        return 0

    if cmd == "train":
        _need(opts, "dataset", "out")
        ds = load_dataset(opts["dataset"])
        cfg, lcfg = _train_configs(opts, ds)
        log.info("train config: %s", json.dumps(asdict(cfg)))
        ck = train(cfg, lcfg, ds)
        save_checkpoint(ck, opts["out"])
        if opts.get("loss_csv"):
            write_loss_csv(ck.history, opts["loss_csv"])
        return 0

    if cmd == "infer":
        _need(opts, "checkpoint", "dataset", "out")
        ck = load_checkpoint(opts["checkpoint"])
        ds = load_dataset(opts["dataset"])
        res = opts.get("target_res") or covered_extents(ds)
        pred = ck.model.superresolve(ds.lr, res)
        save_field(pred, opts["out"], {"source": "continuous", "checkpoint": str(opts["checkpoint"])})
        return 0

    if cmd == "evaluate":
        _need(opts, "pred", "dataset")
        ds = load_dataset(opts["dataset"])
        pred = load_field(opts["pred"])
        rep = evaluate_prediction(ds, pred, meta={"pred": str(opts["pred"]), "dataset": str(opts["dataset"])})
        if opts.get("out"):
            rep.save(opts["out"])
        sys.stdout.write(rep.to_csv())
        return 0

    if cmd == "gamma-sweep":
        _need(opts, "dataset")
        ds = load_dataset(opts["dataset"])
        cfg, lcfg = _train_configs(opts, ds)
        reports, _ = gamma_sweep(ds, opts["gammas"], cfg, lcfg)
        _write_report_table(reports, "gamma", opts.get("out"))
        return 0

    if cmd == "noise-eval":
        _need(opts, "checkpoint", "dataset")
        ck = load_checkpoint(opts["checkpoint"])
        ds = load_dataset(opts["dataset"])
        _write_report_table(noise_eval(ck.model, ds, opts["seed"]), "case", opts.get("out"))
        return 0

    if cmd == "scale-bench":
        _need(opts, "dataset")
        ds = load_dataset(opts["dataset"])
        cfg, lcfg = _train_configs(opts, ds)
        rows = scale_bench(ds, cfg, lcfg, opts["workers"], opts["steps"])
        lines = ["workers,steps,seconds,samples_per_s,speedup,efficiency"]
        lines += [",".join(repr(r[k]) for k in ("workers", "steps", "seconds", "samples_per_s",
                                                 "speedup", "efficiency")) for r in rows]
        text = "\n".join(lines) + "\n"
        if opts.get("out"):
            Path(opts["out"]).write_text(text)
        sys.stdout.write(text)
        return 0

    if cmd == "baseline":
        _need(opts, "dataset", "out")
        ds = load_dataset(opts["dataset"])
        if opts["kind"] == "trilinear":
            pred = trilinear_upsample(ds.lr, opts.get("target_res") or covered_extents(ds))
        elif opts["preset"] == "desk":
            cfg, dcfg = desk_discrete_configs(ds, **_overrides(opts, only_explicit=True))
            model, _ = train_discrete(cfg, ds, dcfg, opts["pred_norm"])
            pred = discrete_sr_baseline(model, ds.lr, ds.norm_stats)
        else:
            cfg, _ = _train_configs(opts, ds)
            dcfg = DiscreteSRConfig(unet=UNetConfig(), upscale=cfg.upscale)
            model, _ = train_discrete(cfg, ds, dcfg, opts["pred_norm"])
            pred = discrete_sr_baseline(model, ds.lr, ds.norm_stats)
        save_field(pred, opts["out"], {"source": opts["kind"]})
        return 0

    raise UsageError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    level = os.environ.get("MFSR_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        try:
            return run(resolve(args))
        except WorkerError as exc:
            raise exc.cause from None
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError, CFLError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, CheckpointFormatError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
