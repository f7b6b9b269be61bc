"""Reports, per-branch diagnostics, and the ablation and sweep harness."""
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .branches import BRANCHES, DISPLAY, FUSION
from .cooperation import VARIANTS
from .errors import ConfigError, DataError
from .metrics import auc, logloss, per_sample_bce
from .runs import execute_run, load_splits

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    auc: float
    logloss: float
    per_branch: dict  # head -> {"auc": .., "logloss": ..}
    n: int

    def rows(self):
        order = [h for h in BRANCHES + (FUSION,) if h in self.per_branch]
        return [(DISPLAY[h], self.per_branch[h]["auc"], self.per_branch[h]["logloss"]) for h in order]

    def table(self):
        return format_table(["branch", "AUC", "LogLoss"], self.rows())

    def record(self, phase="test"):
        rec = {"phase": phase, "n": self.n, "auc": self.auc, "logloss": self.logloss}
        for h, m in self.per_branch.items():
            rec[f"auc.{h}"] = m["auc"]
            rec[f"logloss.{h}"] = m["logloss"]
        return rec


def report_from_heads(heads, n):
    main = FUSION if FUSION in heads else next(iter(heads))
    return EvalReport(heads[main]["auc"], heads[main]["logloss"], heads, n)


def evaluate(model, params, batch):
    """Score ``batch`` with every head; the model row is the fusion head."""
    probs, _ = model.predict(params, batch)
    heads = {h: {"auc": auc(p, batch.labels), "logloss": logloss(p, batch.labels)} for h, p in probs.items()}
    return report_from_heads(heads, batch.size)


def format_table(header, rows):
    """Aligned text table; floats printed with 4 decimals."""
    cells = [list(header)] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = []
    for k, c in enumerate(cells):
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(c, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------- diagnostics


def topk_category_profile(model, params, batch, k):
    """Per head: category histogram of the ``k`` samples with lowest per-sample logloss.

    Ties in logloss are broken by row index (stable sort).
    """
    if batch.categories is None:
        raise DataError("top-k category profile needs rows with a category tag")
    if not 1 <= k <= batch.size:
        raise ConfigError(f"k must be in [1, {batch.size}], got {k}")
    n_cat = int(batch.categories.max()) + 1
    probs, _ = model.predict(params, batch)
    out = {}
    for h, p in probs.items():
        losses = per_sample_bce(p, batch.labels)
        top = np.argsort(losses, kind="stable")[:k]
        out[h] = np.bincount(batch.categories[top], minlength=n_cat)
    return out


def write_histograms(path, hist):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["branch", "category", "count"])
        for h, counts in hist.items():
            for c, n in enumerate(counts):
                w.writerow([h, c, int(n)])


def export_branch_latents(model, params, batch, path):
    """Write one CSV row per (sample, head): ``sample, branch, z0..z{d-1}``."""
    _, latents = model.predict(params, batch)
    heads = list(latents)
    d = latents[heads[0]].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "branch"] + [f"z{i}" for i in range(d)])
        for s in range(batch.size):
            for h in heads:
                w.writerow([s, h] + [repr(float(v)) for v in latents[h][s]])
    return batch.size * len(heads)


# ---------------------------------------------------------------- ablation


REMOVALS = ("full", "wo_efgc", "wo_cross", "wo_deep", "wo_bct", "wo_mdr", "wo_both")
CELLS = REMOVALS + tuple(v for v in VARIANTS if v != "moderate")
LABELS = {
    "full": "MBCnet",
    "wo_efgc": "w/o EFGC",
    "wo_cross": "w/o CrossNet",
    "wo_deep": "w/o DeepNet",
    "wo_bct": "w/o L_BCT",
    "wo_mdr": "w/o L_MDR",
    "wo_both": "w/o L_BCT, w/o L_MDR",
    "strong_to_weak": "strong to weak",
    "weak_to_strong": "weak to strong",
    "no_discrimination": "no discrimination",
    "max_difference": "max difference",
    "min_difference": "min difference",
}


def cell_config(cfg, cell):
    """Run config for one ablation cell derived from the base config."""
    if cell not in CELLS:
        raise ConfigError(f"unknown ablation cell {cell!r} (expected one of {list(CELLS)})")
    coop, model = cfg.coop, cfg.model
    if cell.startswith("wo_") and cell[3:] in BRANCHES:
        branches = tuple(b for b in model.branches if b != cell[3:])
        if len(branches) < 2:
            raise ConfigError(f"cell {cell!r} leaves {len(branches)} branch(es); cooperation needs at least 2")
        model = replace(model, branches=branches)
    elif cell == "wo_bct":
        coop = replace(coop, alpha=0.0)
    elif cell == "wo_mdr":
        coop = replace(coop, beta=0.0)
    elif cell == "wo_both":
        coop = replace(coop, alpha=0.0, beta=0.0)
    elif cell in VARIANTS:
        coop = replace(coop, variant=cell)
    return replace(cfg, model=model, coop=coop).validate()


def parse_cells(spec):
    cells = [c.strip() for c in spec.split(",") if c.strip()] if isinstance(spec, str) else list(spec)
    if not cells:
        raise ConfigError("empty ablation grid")
    for c in cells:
        if c not in CELLS:
            raise ConfigError(f"unknown ablation cell {c!r} (expected one of {list(CELLS)})")
    return cells


@dataclass
class CellResult:
    cell: str
    seed: int
    report: EvalReport
    val_auc: float
    epochs: int


@dataclass
class AblationGrid:
    cells: list
    seeds: list
    results: list = field(default_factory=list)

    def mean(self, cell, metric="auc"):
        vals = [getattr(r.report, metric) for r in self.results if r.cell == cell]
        return float(np.mean(vals))

    def values(self, cell, metric="auc"):
        return {r.seed: getattr(r.report, metric) for r in self.results if r.cell == cell}

    def rows(self):
        return [(LABELS.get(c, c), self.mean(c, "auc"), self.mean(c, "logloss")) for c in self.cells]

    def table(self):
        return format_table(["variant", "AUC", "LogLoss"], self.rows())

    def records(self):
        for r in self.results:
            yield {"cell": r.cell, "seed": r.seed, "val_auc": r.val_auc, "epochs": r.epochs, **r.report.record()}


_SPLITS = None


def _init_worker(splits):
    global _SPLITS
    _SPLITS = splits


def _run_job(job):
    key, cfg, out_dir = job
    outcome = execute_run(cfg, _SPLITS, out_dir)
    report = report_from_heads(outcome.test, _SPLITS.test.size)
    return key, report, outcome.result.best_val_auc, outcome.result.epochs_run


def _dispatch(jobs, splits, n_jobs):
    if n_jobs <= 1 or len(jobs) <= 1:
        _init_worker(splits)
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs, initializer=_init_worker, initargs=(splits,)) as pool:
        return list(pool.map(_run_job, jobs))


def run_ablation(cells, cfg, seeds, splits=None, jobs=1, out_dir=None, on_result=None):
    """Train every (cell, seed) on identical splits and score on the test split."""
    cells = parse_cells(cells)
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    work = []
    for cell in cells:
        ccfg = cell_config(cfg, cell)
        if cell in ("max_difference",):
            log.info("max difference variant: negated distance clipped at %g", ccfg.coop.max_diff_floor)
        for seed in seeds:
            scfg = replace(ccfg, train=replace(ccfg.train, seed=seed))
            sub = str(Path(out_dir) / f"{cell}.seed{seed}") if out_dir else None
            work.append(((cell, seed), scfg, sub))
    splits = splits or load_splits(cfg)
    grid = AblationGrid(cells, seeds)
    for (cell, seed), report, val_auc, epochs in _dispatch(work, splits, jobs):
        res = CellResult(cell, seed, report, val_auc, epochs)
        grid.results.append(res)
        if on_result:
            on_result(res)
    return grid


def sweep(param, values, cfg, splits=None, jobs=1, out_dir=None):
    """Train one run per value of ``coop.alpha`` or ``coop.beta``; returns ``[(value, EvalReport)]``."""
    if param not in ("alpha", "beta"):
        raise ConfigError(f"sweep parameter must be 'alpha' or 'beta', got {param!r}")
    values = [float(v) for v in values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    if any(not math.isfinite(v) or v < 0 for v in values):
        raise ConfigError("sweep values must be finite and >= 0")
    work = []
    for v in values:
        vcfg = replace(cfg, coop=replace(cfg.coop, **{param: v})).validate()
        sub = str(Path(out_dir) / f"{param}={v!r}") if out_dir else None
        work.append((v, vcfg, sub))
    splits = splits or load_splits(cfg)
    return [(v, report) for v, report, _, _ in _dispatch(work, splits, jobs)]


def sweep_table(param, rows):
    return format_table([param, "AUC", "LogLoss"], [(repr(v), r.auc, r.logloss) for v, r in rows])


def write_records(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
