"""Run configuration: an INI file with named sections, dotted overrides and
a canonical serializer (parse -> serialize -> parse is the identity).

Sections::

    [schema]     name = categorical, <vocab>, <dim> | multi_valued, <vocab>, <dim> | numerical, <width>
    [groups]     name = field, field, ...
    [model]      profile, branches, efgc_hidden, efgc_reduce, deep_hidden,
                 cross_experts, cross_layers, cross_rank, cross_reduce, top_hidden
    [train]      batch_size, max_epochs, patience, lr, beta1, beta2, eps, seed, log_every, wallclock
    [coop]       alpha, beta, variant, threshold, eps_count, mdr_norm, max_diff_floor
    [data]       dir | train, val, test; max_bad_fraction
    [generator]  seed, n_train, n_val, n_test, base_rate, field_effect_scale,
                 interaction_strength, planted (a*b or a*b@category), n_categories,
                 category_field, max_multi_len, id_skew
"""
import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .branches import ModelConfig, profile_config
from .cooperation import CoopConfig
from .errors import ConfigError
from .features import FeatureField, FeatureSchema, GeneratorConfig, GroupSpec
from .training import TrainConfig

SECTIONS = ("schema", "groups", "model", "train", "coop", "data", "generator")
REQUIRED = ("schema", "groups")


@dataclass
class DataConfig:
    dir: str = ""
    train: str = ""
    val: str = ""
    test: str = ""
    max_bad_fraction: float = 0.01

    def path(self, split):
        explicit = getattr(self, split)
        if explicit:
            return Path(explicit)
        if not self.dir:
            raise ConfigError(f"data: no path for split {split!r} (set data.dir or data.{split})")
        return Path(self.dir) / f"{split}.csv"


@dataclass
class RunConfig:
    schema: FeatureSchema
    groups: GroupSpec
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    coop: CoopConfig = field(default_factory=CoopConfig)
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    generator_seed: int = 0

    def validate(self):
        """Cross-validate every section before any work starts."""
        self.schema.validate()
        if "efgc" in self.model.branches:
            self.groups.validate(self.schema)
        self.model.validate(self.schema)
        self.train.validate()
        self.coop.validate()
        if not 0.0 <= self.data.max_bad_fraction <= 1.0:
            raise ConfigError("data.max_bad_fraction must be in [0, 1]")
        return self

    def with_overrides(self, **changes):
        """Shallow copy with replaced sub-configs (``model=``, ``coop=``...)."""
        return replace(self, **changes)


# ---------------------------------------------------------------- scalar parsing


def _int(section, key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: expected an integer, got {raw!r}") from None


def _float(section, key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: expected a number, got {raw!r}") from None


def _bool(section, key, raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{section}.{key}: expected a boolean, got {raw!r}")


def _ints(section, key, raw):
    items = [t.strip() for t in raw.split(",") if t.strip()]
    return tuple(_int(section, key, t) for t in items)


def _names(raw):
    return tuple(t.strip() for t in raw.split(",") if t.strip())


def _coerce(section, key, raw, current):
    if isinstance(current, bool):
        return _bool(section, key, raw)
    if isinstance(current, int):
        return _int(section, key, raw)
    if isinstance(current, float):
        return _float(section, key, raw)
    return raw.strip()


def _fill(obj, section, items, skip=()):
    known = {f.name for f in fields(obj)}
    changes = {}
    for key, raw in items.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown key (expected one of {sorted(known - set(skip))})")
        changes[key] = _coerce(section, key, raw, getattr(obj, key))
    return replace(obj, **changes)


# ---------------------------------------------------------------- sections


def _parse_schema(items):
    out = []
    for name, raw in items.items():
        parts = [t.strip() for t in raw.split(",")]
        kind = parts[0]
        if kind == "numerical":
            if len(parts) != 2:
                raise ConfigError(f"schema.{name}: numerical fields are 'numerical, <width>'")
            out.append(FeatureField(name, kind, _int("schema", name, parts[1])))
        elif kind in ("categorical", "multi_valued"):
            if len(parts) != 3:
                raise ConfigError(f"schema.{name}: expected '{kind}, <vocab>, <dim>'")
            out.append(FeatureField(name, kind, _int("schema", name, parts[2]), _int("schema", name, parts[1])))
        else:
            raise ConfigError(f"schema.{name}: unknown kind {kind!r}")
    return FeatureSchema(out)


def _parse_model(items):
    profile = items.get("profile", "desk").strip()
    base = profile_config(profile)
    efgc, deep, cross, top = base.efgc, base.deep, base.cross, base.top
    branches = base.branches
    s = "model"
    for key, raw in items.items():
        if key == "profile":
            continue
        elif key == "branches":
            branches = _names(raw)
        elif key == "efgc_hidden":
            efgc = replace(efgc, hidden=_ints(s, key, raw))
        elif key == "efgc_reduce":
            efgc = replace(efgc, reduce=_int(s, key, raw))
        elif key == "deep_hidden":
            deep = replace(deep, hidden=_ints(s, key, raw))
        elif key == "cross_experts":
            cross = replace(cross, num_experts=_int(s, key, raw))
        elif key == "cross_layers":
            cross = replace(cross, layers=_int(s, key, raw))
        elif key == "cross_rank":
            cross = replace(cross, rank=_int(s, key, raw))
        elif key == "cross_reduce":
            cross = replace(cross, reduce=_int(s, key, raw))
        elif key == "top_hidden":
            top = replace(top, hidden=_ints(s, key, raw))
        else:
            raise ConfigError(f"model.{key}: unknown key")
    return ModelConfig(efgc, deep, cross, top, branches, profile)


def _parse_planted(raw):
    out = []
    for item in _names(raw):
        pair, _, cat = item.partition("@")
        a, sep, b = pair.partition("*")
        if not sep:
            raise ConfigError(f"generator.planted: expected 'field*field[@category]', got {item!r}")
        entry = [a.strip(), b.strip()]
        if cat:
            entry.append(_int("generator", "planted", cat))
        out.append(tuple(entry))
    return out


def _parse_generator(items):
    gen = _fill(GeneratorConfig(), "generator", items, skip=("planted", "seed"))
    if "planted" in items:
        gen = replace(gen, planted=_parse_planted(items["planted"]))
    seed = _int("generator", "seed", items["seed"]) if "seed" in items else 0
    return gen, seed


def parse_config(text, overrides=()):
    """Build a validated :class:`RunConfig` from INI text plus ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {str(exc).splitlines()[0]}") from None
    for item in overrides:
        path, sep, value = item.partition("=")
        section, dot, key = path.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key.strip(), value.strip())
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config sections {unknown} (expected {list(SECTIONS)})")
    for s in REQUIRED:
        if not cp.has_section(s):
            raise ConfigError(f"missing required section [{s}]")
    sec = {s: dict(cp.items(s)) if cp.has_section(s) else {} for s in SECTIONS}
    gen, gen_seed = _parse_generator(sec["generator"])
    cfg = RunConfig(
        schema=_parse_schema(sec["schema"]),
        groups=GroupSpec([(n, _names(v)) for n, v in sec["groups"].items()]),
        model=_parse_model(sec["model"]),
        train=_fill(TrainConfig(), "train", sec["train"]),
        coop=_fill(CoopConfig(), "coop", sec["coop"]),
        data=_fill(DataConfig(), "data", sec["data"]),
        generator=gen,
        generator_seed=gen_seed,
    )
    return cfg.validate()


def load_config(path, overrides=()):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


# ---------------------------------------------------------------- serialization


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def serialize_config(cfg):
    """Canonical INI text listing every key explicitly."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["schema"] = {
        f.name: f"numerical, {f.embed_dim}" if f.kind == "numerical" else f"{f.kind}, {f.vocab_size}, {f.embed_dim}"
        for f in cfg.schema.fields
    }
    cp["groups"] = {n: _fmt(m) for n, m in cfg.groups.groups}
    m = cfg.model
    cp["model"] = {
        "profile": m.profile,
        "branches": _fmt(m.branches),
        "efgc_hidden": _fmt(m.efgc.hidden),
        "efgc_reduce": _fmt(m.efgc.reduce),
        "deep_hidden": _fmt(m.deep.hidden),
        "cross_experts": _fmt(m.cross.num_experts),
        "cross_layers": _fmt(m.cross.layers),
        "cross_rank": _fmt(m.cross.rank),
        "cross_reduce": _fmt(m.cross.reduce),
        "top_hidden": _fmt(m.top.hidden),
    }
    for name in ("train", "coop", "data"):
        obj = getattr(cfg, name)
        cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
    gen = {"seed": str(cfg.generator_seed)}
    for f in fields(cfg.generator):
        v = getattr(cfg.generator, f.name)
        if f.name == "planted":
            v = ", ".join("*".join(p[:2]) + (f"@{p[2]}" if len(p) > 2 else "") for p in v)
        gen[f.name] = _fmt(v)
    cp["generator"] = gen
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()

