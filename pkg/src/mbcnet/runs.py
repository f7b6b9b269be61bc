"""One training run end to end: data loading, the run directory and final test scoring.

A run directory holds ``config.resolved.cfg``, ``metrics.jsonl``, ``best.ckpt``
(best-validation parameters) and ``last.ckpt`` (full state for resuming).
"""
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .branches import MBCNet
from .config import parse_config, serialize_config
from .features import load_csv
from .training import Checkpoint, architecture_hash, checkpoint_save, evaluate_heads, model_head, train

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: object
    val: object
    test: object = None


def load_splits(cfg, need_test=True):
    d = cfg.data
    out = Splits(
        load_csv(d.path("train"), cfg.schema, d.max_bad_fraction),
        load_csv(d.path("val"), cfg.schema, d.max_bad_fraction),
    )
    if need_test:
        out.test = load_csv(d.path("test"), cfg.schema, d.max_bad_fraction)
    return out


def build_model(cfg):
    return MBCNet(cfg.schema, cfg.groups, cfg.model)


class MetricsWriter:
    """Appends one JSON record per line; keys are sorted for byte stability."""

    def __init__(self, path=None, keep=True):
        self.fh = open(path, "w") if path else None
        self.records = [] if keep else None

    def __call__(self, rec):
        if self.records is not None:
            self.records.append(rec)
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()
            self.fh = None


@dataclass
class RunOutcome:
    result: object
    test: dict
    head: str
    records: list


def execute_run(cfg, splits=None, out_dir=None, resume=None, max_steps=None):
    """Train ``cfg`` and score the best parameters on the test split."""
    cfg.validate()
    splits = splits or load_splits(cfg)
    model = build_model(cfg)
    text = serialize_config(cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.cfg").write_text(text)
    writer = MetricsWriter(out / "metrics.jsonl" if out else None)
    try:
        result = train(model, splits.train, splits.val, cfg.train, cfg.coop, sink=writer, resume=resume,
                       max_steps=max_steps)
        test = {}
        if splits.test is not None:
            test = evaluate_heads(model, result.best_params, splits.test)
            rec = {"timestamp": result.checkpoint.meta["seq"] + 1, "phase": "test", "epoch": result.epochs_run,
                   "step": result.steps}
            rec["auc"] = test[model_head(model)]["auc"]
            rec["logloss"] = test[model_head(model)]["logloss"]
            for h, m in test.items():
                rec[f"auc.{h}"] = m["auc"]
                rec[f"logloss.{h}"] = m["logloss"]
            writer(rec)
    finally:
        writer.close()
    result.checkpoint.meta["config"] = text
    if out:
        checkpoint_save(out / "last.ckpt", result.checkpoint)
        checkpoint_save(out / "best.ckpt", best_checkpoint(result, text))
    return RunOutcome(result, test, model_head(model), writer.records)


def best_checkpoint(result, config_text):
    last = result.checkpoint
    meta = dict(last.meta, config=config_text)
    return Checkpoint(last.schema_hash, dict(result.best_params), last.optimizer, meta)


def config_from_checkpoint(ckpt, overrides=()):
    text = ckpt.meta.get("config")
    if not text:
        return None
    return parse_config(text, overrides)


def model_for_checkpoint(ckpt, cfg):
    model = build_model(cfg)
    return model, architecture_hash(model)


def replace_train(cfg, **kw):
    return replace(cfg, train=replace(cfg.train, **kw))
