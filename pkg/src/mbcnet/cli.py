"""``mbcnet`` command-line entry point.

Exit codes: 0 success, 2 configuration errors (including schema mismatch),
1 runtime errors. Every failure prints exactly one line to stderr:
``mbcnet: error: <kind>: <message>``.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MBCError, SchemaMismatchError
from .evaluation import (
    evaluate,
    export_branch_latents,
    run_ablation,
    sweep,
    sweep_table,
    topk_category_profile,
    write_histograms,
    write_records,
)
from .features import generate_synthetic, load_csv
from .runs import build_model, config_from_checkpoint, execute_run
from .training import architecture_hash, checkpoint_load

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
log = logging.getLogger("mbcnet")


class UsageError(ConfigError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _overrides(args):
    out = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        out.append(f"train.seed={args.seed}")
    if getattr(args, "variant", None):
        out.append(f"coop.variant={args.variant}")
    if getattr(args, "profile", None):
        out.append(f"model.profile={args.profile}")
    return out


def _config(args):
    from .config import load_config

    if not args.config:
        raise ConfigError("--config is required")
    return load_config(args.config, _overrides(args))


def _seeds(raw):
    try:
        return [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: expected comma-separated integers, got {raw!r}") from None


# ---------------------------------------------------------------- commands


def cmd_train(args):
    cfg = _config(args)
    out = Path(args.out or "runs/train")
    resume = None
    if args.resume:
        model = build_model(cfg)
        resume = checkpoint_load(args.resume, architecture_hash(model))
    outcome = execute_run(cfg, out_dir=out, resume=resume, max_steps=args.max_steps)
    res = outcome.result
    print(f"best val AUC {res.best_val_auc:.6f} after {res.epochs_run} epochs ({res.steps} steps)")
    if outcome.test:
        from .evaluation import report_from_heads

        print(report_from_heads(outcome.test, 0).table())
    print(f"run directory: {out}")
    return 0


def _checkpoint_and_config(args):
    ckpt = checkpoint_load(args.checkpoint)
    if args.config:
        cfg = _config(args)
    else:
        cfg = config_from_checkpoint(ckpt, _overrides(args))
        if cfg is None:
            raise ConfigError("checkpoint carries no config; pass --config")
    model = build_model(cfg)
    if architecture_hash(model) != ckpt.schema_hash:
        raise SchemaMismatchError("checkpoint schema hash does not match the configured schema and model")
    return ckpt, cfg, model


def _dataset(args, cfg):
    path = args.data or cfg.data.path(args.split)
    return load_csv(path, cfg.schema, cfg.data.max_bad_fraction)


def cmd_evaluate(args):
    ckpt, cfg, model = _checkpoint_and_config(args)
    batch = _dataset(args, cfg)
    report = evaluate(model, ckpt.params, batch)
    print(report.table())
    print(json.dumps(report.record(args.split), sort_keys=True))
    if args.out:
        write_records(args.out, [report.record(args.split)])
    if args.topk:
        hist = topk_category_profile(model, ckpt.params, batch, args.topk)
        path = args.hist_out or "topk_hist.csv"
        write_histograms(path, hist)
        print(f"top-{args.topk} category histograms: {path}")
    return 0


def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out or cfg.data.dir or "data")
    seed = args.seed if args.seed is not None else cfg.generator_seed
    truth = generate_synthetic(cfg.schema, cfg.generator, seed, out)
    print(f"wrote {out}/train.csv, val.csv, test.csv, truth.json (bayes test AUC {truth['bayes_test_auc']:.6f})")
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    seeds = _seeds(args.seeds) if args.seeds else [cfg.train.seed]
    out = Path(args.out) if args.out else None
    grid = run_ablation(args.cells, cfg, seeds, jobs=args.jobs, out_dir=out)
    print(grid.table())
    if out:
        write_records(out / "ablation.jsonl", grid.records())
        (out / "ablation.txt").write_text(grid.table() + "\n")
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    values = [v for v in args.values.split(",") if v.strip()]
    try:
        values = [float(v) for v in values]
    except ValueError:
        raise ConfigError(f"--values: expected comma-separated numbers, got {args.values!r}") from None
    out = Path(args.out) if args.out else None
    rows = sweep(args.param, values, cfg, jobs=args.jobs, out_dir=out)
    print(sweep_table(args.param, rows))
    if out:
        write_records(out / "sweep.jsonl", ({"param": args.param, "value": v, **r.record()} for v, r in rows))
    return 0


def cmd_export_latents(args):
    ckpt, cfg, model = _checkpoint_and_config(args)
    batch = _dataset(args, cfg)
    out = args.out or "latents.csv"
    n = export_branch_latents(model, ckpt.params, batch, out)
    print(f"wrote {n} rows to {out}")
    return 0


def cmd_inspect_checkpoint(args):
    ckpt = checkpoint_load(args.checkpoint)
    meta = {k: v for k, v in ckpt.meta.items() if k not in ("config", "epoch_rng_state")}
    print(f"format version {ckpt.version}")
    print(f"schema hash    {ckpt.schema_hash}")
    print(f"optimizer step {ckpt.optimizer.step}")
    for k in sorted(meta):
        print(f"{k:14s} {meta[k]}")
    n = 0
    for name, arr in ckpt.params.items():
        n += arr.size
        print(f"  {name:32s} {arr.shape[0]}x{arr.shape[1]}  |w|={float(np.linalg.norm(arr)):.6g}")
    print(f"{len(ckpt.params)} tensors, {n} parameters")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="mbcnet", description="Multi-branch cooperation network trainer for CTR prediction.")
    p.add_argument("--version", action="version", version=f"mbcnet {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--profile", choices=("desk", "paper"))
        sp.add_argument("--variant")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--out", help="run directory")
    sp.add_argument("--resume", help="checkpoint to resume from (a run's last.ckpt)")
    sp.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    sp.set_defaults(fn=cmd_train)

    for name, fn, helptext in (
        ("evaluate", cmd_evaluate, "score a checkpoint on a dataset"),
        ("export-latents", cmd_export_latents, "dump per-branch latents as CSV"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("checkpoint")
        common(sp, seed=False)
        sp.add_argument("--data", help="CSV file (default: the config's split)")
        sp.add_argument("--split", default="test", choices=("train", "val", "test"))
        sp.add_argument("--out")
        if name == "evaluate":
            sp.add_argument("--topk", type=int, help="also write per-branch top-k category histograms")
            sp.add_argument("--hist-out")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("gen-data", help="generate a planted-interaction synthetic dataset")
    common(sp)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("ablate", help="train an ablation grid")
    common(sp, seed=False)
    sp.add_argument("--cells", default="full,wo_efgc,wo_bct,wo_mdr,wo_both")
    sp.add_argument("--seeds", help="comma-separated seeds (default: train.seed)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("sweep", help="sweep coop.alpha or coop.beta")
    common(sp)
    sp.add_argument("--param", required=True, choices=("alpha", "beta"))
    sp.add_argument("--values", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header and tensors")
    sp.add_argument("checkpoint")
    sp.set_defaults(fn=cmd_inspect_checkpoint)
    return p


def _setup_logging():
    level = os.environ.get("MBC_LOG_LEVEL", "warn").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"MBC_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _fail(kind, message, code):
    line = " ".join(str(message).split())
    print(f"mbcnet: error: {kind}: {line}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        if not getattr(args, "fn", None):
            raise UsageError("a command is required (train, evaluate, gen-data, ablate, sweep, "
                             "export-latents, inspect-checkpoint)")
        return args.fn(args)
    except ConfigError as exc:
        return _fail(exc.kind, exc, 2)
    except MBCError as exc:
        return _fail(exc.kind, exc, 1)
    except OSError as exc:
        return _fail("io", exc, 1)
    except KeyboardInterrupt:
        return _fail("interrupted", "interrupted", 130)


if __name__ == "__main__":
    sys.exit(main())
