"""Command-line interface.

Subcommands: train, sweep, evaluate, audit, gen-data.  Exit codes give the
failure category: 0 success, 2 config/usage, 3 data, 4 training/numeric,
5 unexpected.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import nn
from .census import census_schema, write_census_csv
from .data import DataError, SynthSpec, synth_generate
from .harness import (DataSource, FullConfig, cmd_audit, cmd_evaluate,
                      cmd_sweep, default_lambda_grid, run_once)
from .trainer import ConfigError, TrainConfig, TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_UNEXPECTED = 5


def _parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip() != ""]


def _parse_grid(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip() != ""]


def _load_full_config(path) -> FullConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        return FullConfig.load(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "lam", None) is not None:
        overrides["lam"] = args.lam
    if not overrides:
        return cfg
    return TrainConfig.from_dict({**cfg.to_dict(), **overrides})


def _do_train(args) -> int:
    cfg = _load_full_config(args.config)
    train_cfg = _apply_overrides(cfg.train, args)
    record = run_once(train_cfg, cfg.data, out_dir=args.out)
    sel = record.selected
    print(f"method={record.method} seed={record.seed} "
          f"test ap={sel['test']['ap']:.4f} gap={sel['test']['gap']:.4f} "
          f"-> {args.out}")
    return EXIT_OK


def _do_sweep(args) -> int:
    cfg = _load_full_config(args.config)
    train_cfg = _apply_overrides(cfg.train, args)
    if args.grid:
        grid = _parse_grid(args.grid)
    else:
        grid = default_lambda_grid(args.grid_min, args.grid_max, args.grid_points)
    seeds = _parse_seeds(args.seeds)
    points = cmd_sweep(train_cfg, cfg.data, grid, seeds, args.out,
                       method=args.method or train_cfg.method, jobs=args.jobs)
    front = [p for p in points if not p.dominated]
    print(f"swept {len(points)} points ({len(front)} non-dominated) -> {args.out}")
    return EXIT_OK


def _do_evaluate(args) -> int:
    cfg = _load_full_config(args.config)
    report = cmd_evaluate(args.checkpoint, cfg.data, split=args.split,
                          seed=args.seed if args.seed is not None else 0)
    payload = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    print(payload)
    return EXIT_OK


def _do_audit(args) -> int:
    cfg = _load_full_config(args.config)
    report = cmd_audit(args.checkpoint, cfg.data, split=args.split,
                       cap=args.cap, step=args.step)
    payload = report.summary()
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({**payload, "alpha_star": [
                None if not np.isfinite(v) else float(v) for v in report.alpha_star
            ]}, fh, sort_keys=True)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def _do_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "census":
        csv_path = os.path.join(args.out, "census.csv")
        write_census_csv(csv_path, n=args.n, seed=args.seed or 7)
        schema_path = os.path.join(args.out, "census.schema.json")
        census_schema().save(schema_path)
        print(f"wrote {csv_path} and {schema_path}")
        return EXIT_OK
    mode = "pair_flip" if args.kind == "pair-flip" else "gaussian"
    spec = SynthSpec(n=args.n, dim=args.dim, shift=args.shift, corr=args.corr,
                     mode=mode)
    ds = synth_generate(spec, seed=args.seed or 7)
    csv_path = os.path.join(args.out, f"synth_{mode}.csv")
    names = ds.encoder.feature_names
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(names + ["label", "group"]) + "\n")
        for i in range(len(ds)):
            vals = [f"{v:.9g}" for v in ds.x[i]]
            fh.write(",".join(vals + [str(int(ds.y[i])), str(int(ds.a[i]))]) + "\n")
    spec_path = os.path.join(args.out, f"synth_{mode}.spec.json")
    with open(spec_path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
    print(f"wrote {csv_path} and {spec_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faircda",
                                description="fairness-aware training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--method")
    t.add_argument("--lam", type=float)
    t.set_defaults(func=_do_train)

    s = sub.add_parser("sweep", help="lambda sweep producing a Pareto table")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", default="0")
    s.add_argument("--grid", help="comma-separated lambda values")
    s.add_argument("--grid-min", type=float, default=0.0)
    s.add_argument("--grid-max", type=float, default=1000.0)
    s.add_argument("--grid-points", type=int, default=20)
    s.add_argument("--method")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    s.set_defaults(func=_do_sweep, lam=None)

    e = sub.add_parser("evaluate", help="metric report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=_do_evaluate)

    a = sub.add_parser("audit", help="minimal-flip robustness audit")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--split", default="test", choices=["train", "val", "test"])
    a.add_argument("--cap", type=float, default=1000.0)
    a.add_argument("--step", type=float, default=10.0)
    a.add_argument("--out")
    a.set_defaults(func=_do_audit)

    g = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    g.add_argument("--kind", choices=["census", "synth", "pair-flip"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=45000)
    g.add_argument("--seed", type=int)
    g.add_argument("--dim", type=int, default=8)
    g.add_argument("--shift", type=float, default=2.0)
    g.add_argument("--corr", type=float, default=0.4)
    g.set_defaults(func=_do_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, nn.NonFiniteGradientError, ad.NonFiniteError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - safety net
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
