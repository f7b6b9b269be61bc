"""Feature schema, embeddings, feature groups, CSV ingestion and synthetic data."""
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import numerics as nx
from .errors import ConfigError, DataError
from .metrics import auc, logloss

log = logging.getLogger(__name__)

KINDS = ("categorical", "multi_valued", "numerical")
LABEL_COLUMN = "label"
CATEGORY_COLUMN = "category"


@dataclass(frozen=True)
class FeatureField:
    """One input column. For numerical fields ``embed_dim`` is the value width."""

    name: str
    kind: str
    embed_dim: int
    vocab_size: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"field {self.name!r}: unknown kind {self.kind!r} (expected one of {KINDS})")
        if self.embed_dim < 1:
            raise ConfigError(f"field {self.name!r}: embed_dim must be >= 1")
        if self.kind != "numerical" and self.vocab_size < 1:
            raise ConfigError(f"field {self.name!r}: vocab_size must be >= 1")


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))

    def validate(self):
        if len(self.fields) < 2:
            raise ConfigError(f"schema needs at least 2 fields, got {len(self.fields)}")
        names = [f.name for f in self.fields]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigError(f"duplicate field names in schema: {dupes}")
        for f in self.fields:
            f.validate()
        if LABEL_COLUMN in names or CATEGORY_COLUMN in names:
            raise ConfigError(f"field names {LABEL_COLUMN!r}/{CATEGORY_COLUMN!r} are reserved")
        return self

    @property
    def names(self):
        return [f.name for f in self.fields]

    def __getitem__(self, name):
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def total_width(self):
        return sum(f.embed_dim for f in self.fields)

    def digest(self):
        return hashlib.sha256(json.dumps([asdict(f) for f in self.fields], sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class GroupSpec:
    groups: tuple  # ((name, (field, ...)), ...)

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple((n, tuple(fs)) for n, fs in self.groups))

    def validate(self, schema):
        if not self.groups:
            raise ConfigError("groups: at least one feature group is required")
        known = set(schema.names)
        for name, members in self.groups:
            if len(members) < 2:
                raise ConfigError(f"group {name!r} needs at least 2 fields, got {list(members)}")
            missing = [m for m in members if m not in known]
            if missing:
                raise ConfigError(f"group {name!r} references unknown fields {missing}")
        return self

    def __len__(self):
        return len(self.groups)

    def width(self, schema, i):
        return sum(schema[m].embed_dim for m in self.groups[i][1])


# ---------------------------------------------------------------- data


@dataclass
class Batch:
    """Column store for B samples.

    ``columns`` maps field name to an int id array (categorical), an
    ``(offsets, ids)`` CSR pair (multi_valued) or a float ``B x width``
    array (numerical).
    """

    columns: dict
    labels: np.ndarray
    categories: np.ndarray = None

    def __post_init__(self):
        n = len(self.labels)
        if n < 1:
            raise DataError("a batch needs at least one sample")
        for name, col in self.columns.items():
            size = len(col[0]) - 1 if isinstance(col, tuple) else len(col)
            if size != n:
                raise DataError(f"column {name!r} has {size} rows, labels have {n}")
        if self.categories is not None and len(self.categories) != n:
            raise DataError("category tags and labels differ in length")

    @property
    def size(self):
        return len(self.labels)

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        cols = {}
        for name, col in self.columns.items():
            cols[name] = kernels.gather_csr(col[0], col[1], rows) if isinstance(col, tuple) else col[rows]
        cats = None if self.categories is None else self.categories[rows]
        return Batch(cols, self.labels[rows], cats)

    def batches(self, batch_size, order=None):
        order = np.arange(self.size) if order is None else order
        for start in range(0, self.size, batch_size):
            yield self.take(order[start : start + batch_size])


def check_batch(batch, schema):
    missing = [n for n in schema.names if n not in batch.columns]
    if missing:
        raise DataError(f"batch is missing schema fields {missing}")
    for f in schema.fields:
        col = batch.columns[f.name]
        if f.kind == "numerical":
            if col.ndim != 2 or col.shape[1] != f.embed_dim:
                raise DataError(f"numerical field {f.name!r} expects width {f.embed_dim}, got {col.shape}")
            continue
        ids = col[1] if f.kind == "multi_valued" else col
        bad = np.flatnonzero((ids < 0) | (ids >= f.vocab_size))
        if len(bad):
            j = int(bad[0])
            row = int(np.searchsorted(col[0], j, side="right") - 1) if f.kind == "multi_valued" else j
            raise DataError(f"field {f.name!r} row {row}: id {int(ids[j])} outside vocab [0, {f.vocab_size})")


# ---------------------------------------------------------------- embeddings


def init_embeddings(schema, rng):
    """Parameter arrays for every field, keyed ``emb.<field>.*``."""
    params = {}
    for f in schema.fields:
        if f.kind == "numerical":
            bound = math.sqrt(6.0 / f.embed_dim)
            params[f"emb.{f.name}.W"] = rng.uniform(-bound, bound, (f.embed_dim, f.embed_dim))
            params[f"emb.{f.name}.b"] = np.zeros((1, f.embed_dim))
        else:
            bound = 1.0 / math.sqrt(f.embed_dim)
            params[f"emb.{f.name}.table"] = rng.uniform(-bound, bound, (f.vocab_size, f.embed_dim))
    return params


def _bag(table_node, ids, offsets):
    vocab = table_node.shape[0]
    out = kernels.embedding_bag(table_node.value, ids, offsets)
    return table_node.tape.record(
        out, (table_node,), lambda g: (kernels.embedding_bag_grad(g, ids, offsets, vocab),), "embedding_bag"
    )


def embed_batch(batch, schema, leaves):
    """One ``B x embed_dim`` node per schema field, in schema order."""
    check_batch(batch, schema)
    out = []
    for f in schema.fields:
        col = batch.columns[f.name]
        if f.kind == "numerical":
            x = leaves[f"emb.{f.name}.W"].tape.const(col)
            out.append(nx.affine(x, leaves[f"emb.{f.name}.W"], leaves[f"emb.{f.name}.b"]))
        elif f.kind == "multi_valued":
            out.append(_bag(leaves[f"emb.{f.name}.table"], col[1], col[0]))
        else:
            out.append(_bag(leaves[f"emb.{f.name}.table"], col, np.arange(len(col) + 1)))
    return out


def group_concat(per_field, schema, spec):
    index = {n: i for i, n in enumerate(schema.names)}
    return [nx.concat_cols([per_field[index[m]] for m in members]) for _, members in spec.groups]


def concat_all(per_field):
    return per_field[0] if len(per_field) == 1 else nx.concat_cols(per_field)


# ---------------------------------------------------------------- csv


def _format_cell(f, value):
    if f.kind == "categorical":
        return str(int(value))
    if f.kind == "multi_valued":
        return "|".join(str(int(v)) for v in value)
    return "|".join(repr(float(v)) for v in value)


def write_csv(path, batch, schema):
    header = schema.names + [LABEL_COLUMN] + ([CATEGORY_COLUMN] if batch.categories is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(batch.size):
            row = []
            for f in schema.fields:
                col = batch.columns[f.name]
                if f.kind == "multi_valued":
                    off, ids = col
                    row.append(_format_cell(f, ids[off[r] : off[r + 1]]))
                else:
                    row.append(_format_cell(f, col[r]))
            row.append(str(int(batch.labels[r])))
            if batch.categories is not None:
                row.append(str(int(batch.categories[r])))
            w.writerow(row)


class CsvReader:
    """Streams :class:`Batch` objects from a CSV file.

    Malformed rows are skipped and recorded in ``errors`` as ``(line, message)``.
    When the bad-row fraction exceeds ``max_bad_fraction`` the stream aborts
    with :class:`DataError` once the file is exhausted.
    """

    def __init__(self, path, schema, batch_size=1024, max_bad_fraction=0.01):
        self.path = Path(path)
        self.schema = schema
        self.batch_size = batch_size
        self.max_bad_fraction = max_bad_fraction
        self.errors = []
        self.rows_read = 0

    def _parse(self, f, cell):
        cell = cell.strip()
        if f.kind == "categorical":
            v = int(cell)
            if not 0 <= v < f.vocab_size:
                raise ValueError(f"id {v} outside vocab [0, {f.vocab_size})")
            return v
        if f.kind == "multi_valued":
            vals = [int(t) for t in cell.split("|")] if cell else []
            for v in vals:
                if not 0 <= v < f.vocab_size:
                    raise ValueError(f"id {v} outside vocab [0, {f.vocab_size})")
            return vals
        vals = [float(t) for t in cell.split("|")]
        if len(vals) != f.embed_dim or not all(math.isfinite(v) for v in vals):
            raise ValueError(f"expected {f.embed_dim} finite values")
        return vals

    def _build(self, rows):
        cols = {}
        for i, f in enumerate(self.schema.fields):
            vals = [r[0][i] for r in rows]
            if f.kind == "categorical":
                cols[f.name] = np.array(vals, dtype=np.int64)
            elif f.kind == "multi_valued":
                off = np.zeros(len(vals) + 1, dtype=np.int64)
                np.cumsum([len(v) for v in vals], out=off[1:])
                flat = [x for v in vals for x in v]
                cols[f.name] = (off, np.array(flat, dtype=np.int64))
            else:
                cols[f.name] = np.array(vals, dtype=np.float64).reshape(len(vals), f.embed_dim)
        labels = np.array([r[1] for r in rows], dtype=np.int64)
        cats = None
        if rows[0][2] is not None:
            cats = np.array([r[2] for r in rows], dtype=np.int64)
        return Batch(cols, labels, cats)

    def __iter__(self):
        with open(self.path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{self.path}: empty file") from None
            missing = [n for n in self.schema.names + [LABEL_COLUMN] if n not in header]
            if missing:
                raise DataError(f"{self.path}: missing columns {missing}")
            pos = [header.index(n) for n in self.schema.names]
            lab = header.index(LABEL_COLUMN)
            cat = header.index(CATEGORY_COLUMN) if CATEGORY_COLUMN in header else None
            pending = []
            for line_no, rec in enumerate(reader, start=2):
                self.rows_read += 1
                try:
                    if len(rec) != len(header):
                        raise ValueError(f"expected {len(header)} cells, got {len(rec)}")
                    values = [self._parse(f, rec[p]) for f, p in zip(self.schema.fields, pos)]
                    label = rec[lab].strip()
                    if label not in ("0", "1"):
                        raise ValueError(f"label {label!r} not in {{0,1}}")
                    tag = int(rec[cat]) if cat is not None else None
                except ValueError as exc:
                    self.errors.append((line_no, str(exc)))
                    log.warning("%s:%d: rejected row: %s", self.path, line_no, exc)
                    continue
                pending.append((values, int(label), tag))
                if len(pending) == self.batch_size:
                    yield self._build(pending)
                    pending = []
            if pending:
                yield self._build(pending)
        if self.rows_read and len(self.errors) / self.rows_read > self.max_bad_fraction:
            shown = "; ".join(f"line {ln}: {msg}" for ln, msg in self.errors[:5])
            raise DataError(
                f"{self.path}: {len(self.errors)}/{self.rows_read} rows malformed "
                f"(> {self.max_bad_fraction:.0%}): {shown}"
            )


def ingest_csv(path, schema, batch_size=1024, max_bad_fraction=0.01):
    return iter(CsvReader(path, schema, batch_size, max_bad_fraction))


def concat_batches(parts):
    parts = list(parts)
    if not parts:
        raise DataError("no rows")
    cols = {}
    for name, col in parts[0].columns.items():
        if isinstance(col, tuple):
            offs, ids, base = [np.zeros(1, dtype=np.int64)], [], 0
            for p in parts:
                o, i = p.columns[name]
                offs.append(o[1:] + base)
                ids.append(i)
                base += o[-1]
            cols[name] = (np.concatenate(offs), np.concatenate(ids).astype(np.int64))
        else:
            cols[name] = np.concatenate([p.columns[name] for p in parts])
    cats = None if parts[0].categories is None else np.concatenate([p.categories for p in parts])
    return Batch(cols, np.concatenate([p.labels for p in parts]), cats)


def load_csv(path, schema, max_bad_fraction=0.01):
    """Read a whole CSV file into one in-memory :class:`Batch`."""
    return concat_batches(CsvReader(path, schema, 65536, max_bad_fraction))


# ---------------------------------------------------------------- synthetic data


@dataclass
class GeneratorConfig:
    """Logistic ground truth: base logit + per-field effects + planted pair lookups.

    ``planted`` entries are ``(field_a, field_b)`` or ``(field_a, field_b, category)``;
    a pair with a category only contributes on rows carrying that tag.
    """

    n_train: int = 200_000
    n_val: int = 50_000
    n_test: int = 50_000
    base_rate: float = 0.2
    field_effect_scale: float = 0.3
    interaction_strength: float = 1.0
    planted: list = field(default_factory=list)
    n_categories: int = 0
    category_field: str = ""
    max_multi_len: int = 4
    id_skew: float = 0.0

    def validate(self, schema):
        if not schema.fields:
            raise ConfigError("generator: schema has zero fields")
        for n in ("n_train", "n_val", "n_test"):
            if getattr(self, n) < 1:
                raise ConfigError(f"generator: {n} must be >= 1")
        if not 0.0 < self.base_rate < 1.0:
            raise ConfigError("generator: base_rate must be in (0, 1)")
        for p in self.planted:
            for name in p[:2]:
                if name not in schema.names:
                    raise ConfigError(f"generator: planted field {name!r} not in schema")
                if schema[name].kind != "categorical":
                    raise ConfigError(f"generator: planted field {name!r} must be categorical")
            if len(p) > 2 and not 0 <= int(p[2]) < max(self.n_categories, 1):
                raise ConfigError(f"generator: planted pair {p} names an unknown category")
        if self.category_field:
            if self.category_field not in schema.names or schema[self.category_field].kind != "categorical":
                raise ConfigError("generator: category_field must be a categorical schema field")
            if schema[self.category_field].vocab_size != self.n_categories:
                raise ConfigError("generator: category_field vocab must equal n_categories")
        return self


def _draw_ids(rng, vocab, n, skew):
    if skew <= 0:
        return rng.integers(0, vocab, n)
    w = 1.0 / np.arange(1, vocab + 1) ** skew
    return rng.choice(vocab, size=n, p=w / w.sum())


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_synthetic(schema, gen, seed, out_dir):
    """Write train/val/test CSVs and ``truth.json``; returns the truth dict.

    Everything, including the ground-truth tables, is drawn from one
    ``numpy.random.default_rng(seed)`` stream in a fixed order.
    """
    schema.validate()
    gen.validate(schema)
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = gen.n_train + gen.n_val + gen.n_test

    base = math.log(gen.base_rate / (1.0 - gen.base_rate))
    effects = {}
    for f in schema.fields:
        size = f.embed_dim if f.kind == "numerical" else f.vocab_size
        effects[f.name] = rng.normal(0.0, gen.field_effect_scale, size) if gen.field_effect_scale > 0 else np.zeros(size)
    tables = []
    for p in gen.planted:
        va, vb = schema[p[0]].vocab_size, schema[p[1]].vocab_size
        tables.append(rng.normal(0.0, gen.interaction_strength, (va, vb)))

    cols = {}
    categories = None
    if gen.n_categories:
        categories = rng.integers(0, gen.n_categories, n)
    for f in schema.fields:
        if f.name == gen.category_field:
            cols[f.name] = categories.copy()
        elif f.kind == "categorical":
            cols[f.name] = _draw_ids(rng, f.vocab_size, n, gen.id_skew)
        elif f.kind == "multi_valued":
            lengths = rng.integers(0, gen.max_multi_len + 1, n)
            off = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(lengths, out=off[1:])
            cols[f.name] = (off, _draw_ids(rng, f.vocab_size, int(off[-1]), gen.id_skew))
        else:
            cols[f.name] = rng.normal(0.0, 1.0, (n, f.embed_dim))

    logit = np.full(n, base)
    for f in schema.fields:
        col, eff = cols[f.name], effects[f.name]
        if f.kind == "categorical":
            logit += eff[col]
        elif f.kind == "multi_valued":
            off, ids = col
            sums = np.bincount(np.repeat(np.arange(n), np.diff(off)), weights=eff[ids], minlength=n)
            logit += sums / np.maximum(np.diff(off), 1)
        else:
            logit += col @ eff
    for p, table in zip(gen.planted, tables):
        term = table[cols[p[0]], cols[p[1]]]
        if len(p) > 2:
            term = term * (categories == int(p[2]))
        logit += term
    prob = _sigmoid(logit)
    labels = (rng.random(n) < prob).astype(np.int64)

    full = Batch(cols, labels, categories)
    bounds = {"train": (0, gen.n_train), "val": (gen.n_train, gen.n_train + gen.n_val), "test": (gen.n_train + gen.n_val, n)}
    truth = {
        "seed": seed,
        "generator": asdict(gen),
        "base_logit": base,
        "field_effects": {k: v.tolist() for k, v in effects.items()},
        "planted_tables": [t.tolist() for t in tables],
    }
    for split, (a, b) in bounds.items():
        part = full.take(np.arange(a, b))
        write_csv(out_dir / f"{split}.csv", part, schema)
        y, p = labels[a:b], prob[a:b]
        truth[f"{split}_rows"] = int(b - a)
        truth[f"{split}_positive_rate"] = float(y.mean())
        try:
            truth[f"bayes_{split}_auc"] = auc(logit[a:b], y)
        except Exception:
            truth[f"bayes_{split}_auc"] = None
        truth[f"bayes_{split}_logloss"] = logloss(p, y)
    with open(out_dir / "truth.json", "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    log.info("generated %d rows into %s (bayes test auc %s)", n, out_dir, truth["bayes_test_auc"])
    return truth


def bayes_logit(truth, batch, schema):
    """Recompute the ground-truth logit for rows of ``batch`` from a truth dict."""
    gen = truth["generator"]
    n = batch.size
    logit = np.full(n, truth["base_logit"])
    for f in schema.fields:
        eff = np.asarray(truth["field_effects"][f.name])
        col = batch.columns[f.name]
        if f.kind == "categorical":
            logit += eff[col]
        elif f.kind == "multi_valued":
            off, ids = col
            sums = np.bincount(np.repeat(np.arange(n), np.diff(off)), weights=eff[ids], minlength=n)
            logit += sums / np.maximum(np.diff(off), 1)
        else:
            logit += col @ eff
    for p, table in zip(gen["planted"], truth["planted_tables"]):
        term = np.asarray(table)[batch.columns[p[0]], batch.columns[p[1]]]
        if len(p) > 2:
            term = term * (batch.categories == int(p[2]))
        logit += term
    return logit
