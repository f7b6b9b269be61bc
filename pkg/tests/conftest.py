import numpy as np
import pytest

from mbcnet.branches import MBCNet, profile_config
from mbcnet.features import Batch, FeatureField, FeatureSchema, GroupSpec

TINY_FIELDS = [
    FeatureField("a", "categorical", 4, 6),
    FeatureField("b", "categorical", 4, 6),
    FeatureField("c", "categorical", 4, 5),
    FeatureField("d", "categorical", 4, 5),
    FeatureField("m", "multi_valued", 4, 5),
    FeatureField("x", "numerical", 2),
]


def tiny_schema():
    return FeatureSchema(TINY_FIELDS)


def tiny_groups():
    return GroupSpec([("g0", ("a", "b")), ("g1", ("c", "d", "m"))])


def random_batch(schema, n, rng, categories=0):
    cols = {}
    for f in schema.fields:
        if f.kind == "categorical":
            cols[f.name] = rng.integers(0, f.vocab_size, n)
        elif f.kind == "multi_valued":
            lengths = rng.integers(0, 4, n)
            off = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(lengths, out=off[1:])
            cols[f.name] = (off, rng.integers(0, f.vocab_size, int(off[-1])))
        else:
            cols[f.name] = rng.normal(size=(n, f.embed_dim))
    labels = rng.integers(0, 2, n)
    labels[0], labels[-1] = 0, 1
    cats = rng.integers(0, categories, n) if categories else None
    return Batch(cols, labels, cats)


def small_config(**kw):
    from mbcnet.branches import CrossConfig, DeepConfig, EfgcConfig, SharedTopConfig

    base = dict(
        efgc=EfgcConfig(hidden=(8, 4), reduce=6),
        deep=DeepConfig(hidden=(10, 6)),
        cross=CrossConfig(num_experts=2, layers=2, rank=3, reduce=6),
        top=SharedTopConfig(hidden=(5, 4)),
    )
    base.update(kw)
    return profile_config("desk", **base)


@pytest.fixture
def schema():
    return tiny_schema()


@pytest.fixture
def groups():
    return tiny_groups()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model(schema, groups):
    return MBCNet(schema, groups, small_config())


@pytest.fixture
def desk_model(schema, groups):
    return MBCNet(schema, groups, profile_config("desk"))


TINY_CFG = """
[schema]
a = categorical, 6, 4
b = categorical, 6, 4
c = categorical, 5, 4
d = categorical, 5, 4
m = multi_valued, 5, 4
x = numerical, 2

[groups]
g0 = a, b
g1 = c, d, m

[model]
profile = desk
efgc_hidden = 8, 4
efgc_reduce = 6
deep_hidden = 10, 6
cross_experts = 2
cross_layers = 2
cross_rank = 3
cross_reduce = 6
top_hidden = 5, 4

[train]
batch_size = 64
max_epochs = 2
patience = 2
lr = 0.005

[generator]
seed = 5
n_train = 600
n_val = 300
n_test = 300
planted = a*b, c*d@1
n_categories = 5
category_field = c
"""


@pytest.fixture
def cfg_text():
    return TINY_CFG


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Generated CSV splits plus the parsed config pointing at them."""
    from mbcnet.config import parse_config
    from mbcnet.features import generate_synthetic

    d = tmp_path_factory.mktemp("data")
    cfg = parse_config(TINY_CFG, [f"data.dir={d}"])
    generate_synthetic(cfg.schema, cfg.generator, cfg.generator_seed, d)
    return cfg


@pytest.fixture(scope="session")
def tiny_run(tiny_data, tmp_path_factory):
    from mbcnet.runs import execute_run

    out = tmp_path_factory.mktemp("run")
    return execute_run(tiny_data, out_dir=out), out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
