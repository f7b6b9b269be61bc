import json

import numpy as np
import pytest

from mbcnet import numerics as nx
from mbcnet.errors import ConfigError, DataError
from mbcnet.features import (
    Batch,
    CsvReader,
    FeatureField,
    FeatureSchema,
    GeneratorConfig,
    GroupSpec,
    bayes_logit,
    concat_all,
    embed_batch,
    generate_synthetic,
    group_concat,
    init_embeddings,
    load_csv,
    write_csv,
)
from mbcnet.metrics import auc

from conftest import random_batch


def leaves_for(schema, seed=0):
    params = init_embeddings(schema, np.random.default_rng(seed))
    tape = nx.Tape()
    return tape, {k: tape.leaf(v, name=k) for k, v in params.items()}


# ---------------------------------------------------------------- schema


def test_schema_validation_errors():
    with pytest.raises(ConfigError, match="at least 2"):
        FeatureSchema([FeatureField("a", "categorical", 2, 3)]).validate()
    with pytest.raises(ConfigError, match="duplicate"):
        FeatureSchema([FeatureField("a", "categorical", 2, 3)] * 2).validate()
    with pytest.raises(ConfigError, match="vocab_size"):
        FeatureSchema([FeatureField("a", "categorical", 2, 0), FeatureField("b", "numerical", 1)]).validate()
    with pytest.raises(ConfigError, match="embed_dim"):
        FeatureSchema([FeatureField("a", "categorical", 0, 3), FeatureField("b", "numerical", 1)]).validate()
    with pytest.raises(ConfigError, match="kind"):
        FeatureSchema([FeatureField("a", "dense", 2, 3), FeatureField("b", "numerical", 1)]).validate()
    with pytest.raises(ConfigError, match="reserved"):
        FeatureSchema([FeatureField("label", "numerical", 1), FeatureField("b", "numerical", 1)]).validate()


def test_group_validation(schema):
    GroupSpec([("g", ("a", "b")), ("h", ("a", "c"))]).validate(schema)  # overlap allowed
    with pytest.raises(ConfigError, match="at least 2"):
        GroupSpec([("g", ("a",))]).validate(schema)
    with pytest.raises(ConfigError, match="unknown fields"):
        GroupSpec([("g", ("a", "zz"))]).validate(schema)


def test_schema_digest_tracks_fields(schema):
    other = FeatureSchema(list(schema.fields[:-1]) + [FeatureField("x", "numerical", 3)])
    assert schema.digest() == FeatureSchema(schema.fields).digest()
    assert schema.digest() != other.digest()


# ---------------------------------------------------------------- embeddings


def test_embed_examples(schema):
    tape, lv = leaves_for(schema)
    table = lv["emb.m.table"].value
    cols = {
        "a": np.array([3, 0]),
        "b": np.array([0, 1]),
        "c": np.array([0, 0]),
        "d": np.array([1, 1]),
        "m": (np.array([0, 2, 4]), np.array([2, 2, 1, 3])),
        "x": np.zeros((2, 2)),
    }
    out = embed_batch(Batch(cols, np.array([0, 1])), schema, lv)
    assert np.array_equal(out[0].value[0], lv["emb.a.table"].value[3])
    assert np.array_equal(out[4].value[0], table[2])
    assert np.array_equal(out[4].value[1], (table[1] + table[3]) / 2)
    assert all(o.shape == (2, f.embed_dim) for o, f in zip(out, schema.fields))


def test_empty_multi_valued_is_zero(schema, rng):
    batch = random_batch(schema, 3, rng)
    batch.columns["m"] = (np.array([0, 0, 1, 1]), np.array([4]))
    _, lv = leaves_for(schema)
    out = embed_batch(batch, schema, lv)
    assert np.array_equal(out[4].value[0], np.zeros(4))
    assert np.array_equal(out[4].value[2], np.zeros(4))


def test_out_of_range_id_names_field_and_row(schema, rng):
    batch = random_batch(schema, 4, rng)
    batch.columns["c"] = np.array([0, 1, 9, 0])
    _, lv = leaves_for(schema)
    with pytest.raises(DataError, match=r"'c' row 2"):
        embed_batch(batch, schema, lv)


def test_embed_is_pure(schema, rng):
    batch = random_batch(schema, 5, rng)
    _, lv = leaves_for(schema)
    a = [o.value for o in embed_batch(batch, schema, lv)]
    b = [o.value for o in embed_batch(batch, schema, lv)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_table_gradient_only_on_present_ids(schema):
    cols = {
        "a": np.array([1, 1]),
        "b": np.array([0, 2]),
        "c": np.array([0, 0]),
        "d": np.array([1, 1]),
        "m": (np.array([0, 1, 1]), np.array([3])),
        "x": np.ones((2, 2)),
    }
    tape, lv = leaves_for(schema)
    out = embed_batch(Batch(cols, np.array([0, 1])), schema, lv)
    tape.backward(nx.sum_all(nx.square(concat_all(out))))
    g = lv["emb.a.table"].grad
    assert np.any(g[1] != 0)
    assert not np.any(np.delete(g, 1, axis=0))
    assert not np.any(np.delete(lv["emb.m.table"].grad, 3, axis=0))


def test_group_concat_and_slicing(schema, rng):
    batch = random_batch(schema, 3, rng)
    _, lv = leaves_for(schema)
    per_field = embed_batch(batch, schema, lv)
    spec = GroupSpec([("g", ("a", "m")), ("h", ("m", "c"))])
    g0, g1 = group_concat(per_field, schema, spec)
    assert g0.shape == (3, 8)
    assert np.array_equal(g0.value[:, 4:], g1.value[:, :4])  # shared lookup
    assert np.array_equal(g0.value[:, :4], per_field[0].value)
    swapped = group_concat(per_field, schema, GroupSpec([("g", ("m", "a"))]))[0]
    assert np.array_equal(swapped.value, np.concatenate([g0.value[:, 4:], g0.value[:, :4]], axis=1))


def test_concat_all_width(schema, rng):
    _, lv = leaves_for(schema)
    x = concat_all(embed_batch(random_batch(schema, 2, rng), schema, lv))
    assert x.shape == (2, schema.total_width)


def test_numerical_affine_width():
    schema = FeatureSchema([FeatureField("p", "numerical", 3), FeatureField("q", "numerical", 1)])
    params = init_embeddings(schema, np.random.default_rng(0))
    assert params["emb.p.W"].shape == (3, 3) and params["emb.q.b"].shape == (1, 1)


# ---------------------------------------------------------------- csv


def test_csv_round_trip(tmp_path, schema, rng):
    batch = random_batch(schema, 10, rng, categories=3)
    path = tmp_path / "d.csv"
    write_csv(path, batch, schema)
    back = load_csv(path, schema)
    for f in schema.fields:
        a, b = batch.columns[f.name], back.columns[f.name]
        if isinstance(a, tuple):
            assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        else:
            assert np.array_equal(a, b)
    assert np.array_equal(batch.labels, back.labels)
    assert np.array_equal(batch.categories, back.categories)


def test_csv_batch_partition(tmp_path, schema, rng):
    path = tmp_path / "d.csv"
    write_csv(path, random_batch(schema, 10, rng), schema)
    assert [b.size for b in CsvReader(path, schema, batch_size=4)] == [4, 4, 2]


def _write_rows(path, header, rows):
    path.write_text("\n".join([",".join(header)] + rows) + "\n")


def test_csv_rejects_bad_rows_with_line_numbers(tmp_path, schema):
    header = schema.names + ["label"]
    good = "1,2,3,4,1|2,0.5|1.5,0"
    rows = [good] * 300 + ["1,2,3,4,1|2,0.5|1.5,2"]
    _write_rows(tmp_path / "d.csv", header, rows)
    reader = CsvReader(tmp_path / "d.csv", schema, batch_size=1000)
    batches = list(reader)
    assert sum(b.size for b in batches) == 300
    assert reader.errors[0][0] == 302 and "label" in reader.errors[0][1]


def test_csv_aborts_above_bad_fraction(tmp_path, schema):
    header = schema.names + ["label"]
    rows = ["1,2,3,4,1|2,0.5|1.5,0"] * 10 + ["x,2,3,4,,0.5|1.5,1", "1,2,3,99,,0.5|1.5,1"]
    _write_rows(tmp_path / "d.csv", header, rows)
    with pytest.raises(DataError, match="2/12 rows malformed"):
        list(CsvReader(tmp_path / "d.csv", schema))


def test_csv_missing_column(tmp_path, schema):
    _write_rows(tmp_path / "d.csv", schema.names, ["1,2,3,4,1,0.5|1.5"])
    with pytest.raises(DataError, match="missing columns"):
        load_csv(tmp_path / "d.csv", schema)


def test_csv_empty_multi_valued_cell(tmp_path, schema):
    _write_rows(tmp_path / "d.csv", schema.names + ["label"], ["1,2,3,4,,0.5|1.5,1", "0,0,0,0,3,0|0,0"])
    batch = load_csv(tmp_path / "d.csv", schema)
    off, ids = batch.columns["m"]
    assert off.tolist() == [0, 0, 1] and ids.tolist() == [3]


# ---------------------------------------------------------------- generator


def gen_schema():
    return FeatureSchema(
        [
            FeatureField("u", "categorical", 4, 20),
            FeatureField("v", "categorical", 4, 15),
            FeatureField("w", "categorical", 4, 3),
            FeatureField("t", "multi_valued", 4, 10),
            FeatureField("p", "numerical", 2),
        ]
    )


def test_generator_is_deterministic(tmp_path):
    gen = GeneratorConfig(n_train=500, n_val=200, n_test=200, planted=[("u", "v")])
    generate_synthetic(gen_schema(), gen, 11, tmp_path / "a")
    generate_synthetic(gen_schema(), gen, 11, tmp_path / "b")
    for name in ("train.csv", "val.csv", "test.csv", "truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    generate_synthetic(gen_schema(), gen, 12, tmp_path / "c")
    assert (tmp_path / "a" / "train.csv").read_bytes() != (tmp_path / "c" / "train.csv").read_bytes()


def test_generator_truth_matches_bayes_oracle(tmp_path):
    schema = gen_schema()
    gen = GeneratorConfig(
        n_train=300, n_val=300, n_test=2000, planted=[("u", "v"), ("v", "w", 1)], n_categories=3, category_field="w"
    )
    truth = generate_synthetic(schema, gen, 3, tmp_path)
    test = load_csv(tmp_path / "test.csv", schema)
    logit = bayes_logit(json.loads((tmp_path / "truth.json").read_text()), test, schema)
    assert auc(logit, test.labels) == pytest.approx(truth["bayes_test_auc"], abs=1e-9)
    assert np.array_equal(test.categories, test.columns["w"])
    assert truth["bayes_test_auc"] > 0.6


def test_generator_without_signal_is_chance(tmp_path):
    schema = gen_schema()
    gen = GeneratorConfig(n_train=100, n_val=100, n_test=20000, field_effect_scale=0.0, base_rate=0.3)
    truth = generate_synthetic(schema, gen, 5, tmp_path)
    test = load_csv(tmp_path / "test.csv", schema)
    assert abs(truth["test_positive_rate"] - 0.3) < 0.02
    score = np.random.default_rng(0).random(test.size) + 0.1 * test.columns["u"]
    assert abs(auc(score, test.labels) - 0.5) < 0.02


def test_generator_config_errors():
    schema = gen_schema()
    with pytest.raises(ConfigError, match="n_train"):
        GeneratorConfig(n_train=0).validate(schema)
    with pytest.raises(ConfigError, match="not in schema"):
        GeneratorConfig(planted=[("u", "zz")]).validate(schema)
    with pytest.raises(ConfigError, match="categorical"):
        GeneratorConfig(planted=[("u", "t")]).validate(schema)
    with pytest.raises(ConfigError, match="base_rate"):
        GeneratorConfig(base_rate=1.0).validate(schema)
