import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbcnet import numerics as nx
from mbcnet.branches import FUSION, BranchOutput
from mbcnet.cooperation import (
    THRESHOLD,
    CoopConfig,
    bct_loss,
    bct_loss_reference,
    classify_disagreement,
    fuse,
    latent_distance,
    mdr_loss,
    transform,
    transform_deviation,
    variant_total_loss,
)
from mbcnet.errors import ConfigError

BR = ("efgc", "deep", "cross")
GRID = np.round(np.arange(0.05, 0.96, 0.05), 2)


def prob_nodes(tape, probs):
    return {b: tape.leaf(np.asarray(p, dtype=float).reshape(-1, 1), name=b) for b, p in probs.items()}


def outputs_from(tape, probs, latents):
    out = {}
    for b in probs:
        p = tape.leaf(np.asarray(probs[b], dtype=float).reshape(-1, 1))
        z = tape.leaf(np.asarray(latents[b], dtype=float))
        out[b] = BranchOutput(b, z, None, p)
    return out


def value(node):
    return float(node.value[0, 0])


# ---------------------------------------------------------------- disagreement


def test_threshold_is_log_two():
    assert THRESHOLD == -math.log(0.5)


def test_classify_examples():
    i_ij, i_ji = classify_disagreement(np.array([0.9]), np.array([0.3]), np.array([1]))
    assert i_ij.tolist() == [True] and i_ji.tolist() == [False]
    i_ij, i_ji = classify_disagreement(np.array([0.9]), np.array([0.9]), np.array([1]))
    assert not i_ij.any() and not i_ji.any()
    for y in (0, 1):
        i_ij, i_ji = classify_disagreement(np.array([0.5]), np.array([0.1]), np.array([y]))
        assert not i_ij.any() and not i_ji.any()


@settings(max_examples=200)
@given(st.lists(st.tuples(st.sampled_from(list(GRID) + [0.5]), st.sampled_from(list(GRID) + [0.5]), st.integers(0, 1)),
                min_size=1, max_size=10))
def test_indicators_are_mutually_exclusive(rows):
    p_i, p_j, y = (np.array(c) for c in zip(*rows))
    i_ij, i_ji = classify_disagreement(p_i, p_j, y)
    assert not np.any(i_ij & i_ji)


# ---------------------------------------------------------------- co-teaching


def test_bct_zero_when_branches_agree():
    tape = nx.Tape()
    probs = prob_nodes(tape, {"efgc": [0.9, 0.2], "deep": [0.8, 0.1], "cross": [0.7, 0.3]})
    loss, count = bct_loss(probs, np.array([1, 0]), BR)
    assert value(loss) == 0.0 and count == 0


def test_bct_single_pair_example():
    tape = nx.Tape()
    probs = prob_nodes(tape, {"efgc": [0.9], "deep": [0.3]})
    loss, count = bct_loss(probs, np.array([1]), ("efgc", "deep"))
    expected = -(0.9 * math.log(0.3) + 0.1 * math.log(0.7))
    assert count == 1
    assert value(loss) == pytest.approx(1.1192, abs=1e-4)
    assert value(loss) == pytest.approx(expected / (1 + 1e-8), rel=1e-15)


def test_weak_to_strong_example():
    tape = nx.Tape()
    probs = prob_nodes(tape, {"efgc": [0.9], "deep": [0.3]})
    loss, count = bct_loss(probs, np.array([1]), ("efgc", "deep"), mode="weak_to_strong")
    assert count == 1
    expected = -(0.3 * math.log(0.9) + 0.7 * math.log(0.1))
    assert value(loss) == pytest.approx(expected / (1 + 1e-8), rel=1e-15)
    assert value(loss) == pytest.approx(1.6434, abs=1e-4)


def test_no_discrimination_selects_everything():
    tape = nx.Tape()
    probs = prob_nodes(tape, {"efgc": [0.9, 0.2], "deep": [0.8, 0.1], "cross": [0.7, 0.3]})
    _, count = bct_loss(probs, np.array([1, 0]), BR, mode="all")
    assert count == 2 * 3 * 2


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 4).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from(list(GRID)), min_size=3 * n, max_size=3 * n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.sampled_from(["strong_to_weak", "weak_to_strong", "all"]),
)))
def test_bct_matches_loop_oracle(case):
    flat, y, mode = case
    n = len(y)
    p = {b: flat[k * n : (k + 1) * n] for k, b in enumerate(BR)}
    tape = nx.Tape()
    loss, count = bct_loss(prob_nodes(tape, p), np.array(y), BR, mode=mode)
    ref, ref_count = bct_loss_reference(p, y, BR, mode=mode)
    assert count == ref_count
    assert value(loss) == ref


def test_bct_gradient_reaches_student_only():
    tape = nx.Tape()
    probs = prob_nodes(tape, {"efgc": [0.9], "deep": [0.3]})
    loss, _ = bct_loss(probs, np.array([1]), ("efgc", "deep"))
    tape.backward(loss)
    assert np.array_equal(probs["efgc"].grad, np.zeros((1, 1)))
    assert probs["deep"].grad[0, 0] != 0.0


# ---------------------------------------------------------------- differentiation


def w_leaves(tape, d, pairs=(("efgc", "deep"), ("efgc", "cross"), ("deep", "cross")), init=None):
    return {f"coop.W.{a}.{b}": tape.leaf(np.eye(d) if init is None else init, name=f"{a}.{b}") for a, b in pairs}


def test_mdr_fixed_point():
    tape = nx.Tape()
    z = np.random.default_rng(0).normal(size=(5, 4))
    lat = {b: tape.leaf(z.copy()) for b in BR}
    assert abs(value(mdr_loss(lat, w_leaves(tape, 4), BR))) <= 1e-12


def test_mdr_hand_case():
    tape = nx.Tape()
    lat = {"efgc": tape.leaf([[1.0, 0.0]]), "deep": tape.leaf([[0.0, 1.0]])}
    loss = mdr_loss(lat, w_leaves(tape, 2, pairs=(("efgc", "deep"),)), ("efgc", "deep"))
    assert value(loss) == pytest.approx(2.0, abs=1e-12)


def test_mdr_unsquared_variant():
    tape = nx.Tape()
    lat = {"efgc": tape.leaf([[3.0, 0.0]]), "deep": tape.leaf([[0.0, 4.0]])}
    loss = mdr_loss(lat, w_leaves(tape, 2, pairs=(("efgc", "deep"),)), ("efgc", "deep"), norm="unsquared")
    # round-trip residuals are zero, where the smoothed sqrt contributes 1e-6 each
    assert value(loss) == pytest.approx(5.0, abs=2e-6)


def test_reverse_transform_is_tied_transpose():
    tape = nx.Tape()
    w = np.arange(4.0).reshape(2, 2)
    lv = {"coop.W.efgc.deep": tape.leaf(w)}
    assert np.array_equal(transform(lv, "deep", "efgc").value, w.T)
    assert transform(lv, "efgc", "deep") is lv["coop.W.efgc.deep"]


def test_mdr_gradient_check():
    rng = np.random.default_rng(4)
    params = {b: rng.normal(size=(3, 4)) for b in BR}
    params.update({f"coop.W.{a}.{b}": np.eye(4) + 0.2 * rng.normal(size=(4, 4))
                   for a, b in (("efgc", "deep"), ("efgc", "cross"), ("deep", "cross"))})
    for norm in ("squared", "unsquared"):
        res = nx.grad_check(lambda t, lv: mdr_loss({b: lv[b] for b in BR}, lv, BR, norm), params)
        assert res.max_error < 1e-4


def test_orthogonal_transform_preserves_inner_products():
    rng = np.random.default_rng(7)
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    a, b = rng.normal(size=8), rng.normal(size=8)
    assert abs((a @ q) @ (b @ q) - a @ b) < 1e-10
    assert transform_deviation({"coop.W.efgc.deep": q}, ("efgc", "deep"))["efgc.deep"] < 1e-12


def test_fuse_examples():
    tape = nx.Tape()
    z = tape.const([[0.1, 0.7, -0.3]])
    assert np.array_equal(fuse([z, z, z]).value, z.value)
    parts = [tape.const([[1.0, 3.0]]), tape.const([[3.0, 5.0]]), tape.const([[2.0, 4.0]])]
    assert fuse(parts).value.tolist() == [[2.0, 4.0]]
    assert fuse(parts[::-1]).value.tolist() == [[2.0, 4.0]]


def test_latent_distance_zero_for_identical_latents():
    tape = nx.Tape()
    z = tape.const(np.ones((2, 3)))
    assert value(latent_distance({b: z for b in BR}, BR)) == 0.0


# ---------------------------------------------------------------- composite objective


def make_case(seed=0, n=6, d=4):
    rng = np.random.default_rng(seed)
    probs = {h: rng.uniform(0.05, 0.95, n) for h in BR + (FUSION,)}
    lat = {h: rng.normal(size=(n, d)) for h in BR + (FUSION,)}
    y = rng.integers(0, 2, n)
    return probs, lat, y


def test_total_loss_all_half():
    tape = nx.Tape()
    probs = {h: np.full(3, 0.5) for h in BR + (FUSION,)}
    lat = {h: np.zeros((3, 2)) for h in probs}
    out = outputs_from(tape, probs, lat)
    loss, parts = variant_total_loss("moderate", out, np.array([0, 1, 1]), w_leaves(tape, 2), BR, CoopConfig())
    assert parts.l_ctr == pytest.approx(2.7726, abs=1e-4)
    assert parts.l_ctr == 4 * -math.log(0.5)
    assert parts.l_bct == 0.0 and parts.n_selected == 0


@pytest.mark.parametrize("variant", ["moderate", "weak_to_strong", "no_discrimination", "max_difference", "min_difference"])
def test_breakdown_identity_is_exact(variant):
    probs, lat, y = make_case(1)
    tape = nx.Tape()
    cfg = CoopConfig(alpha=0.3, beta=0.7)
    loss, parts = variant_total_loss(variant, outputs_from(tape, probs, lat), y, w_leaves(tape, 4), BR, cfg)
    assert parts.total == parts.l_ctr + cfg.alpha * parts.l_bct + cfg.beta * parts.l_mdr
    assert parts.total == value(loss)


def test_zero_weights_give_pure_ctr_and_no_transform_gradient():
    probs, lat, y = make_case(2)
    tape = nx.Tape()
    w = w_leaves(tape, 4)
    out = outputs_from(tape, probs, lat)
    loss, parts = variant_total_loss("moderate", out, y, w, BR, CoopConfig(alpha=0.0, beta=0.0))
    tape.backward(loss)
    assert parts.l_bct == 0.0 and parts.l_mdr == 0.0 and parts.total == parts.l_ctr
    assert all(not leaf.grad.any() for leaf in w.values())
    assert sum(parts.per_head.values()) == pytest.approx(parts.l_ctr, rel=1e-15)


def test_strong_to_weak_aliases_moderate():
    probs, lat, y = make_case(3)
    totals = []
    for variant in ("moderate", "strong_to_weak"):
        tape = nx.Tape()
        loss, _ = variant_total_loss(variant, outputs_from(tape, probs, lat), y, w_leaves(tape, 4), BR, CoopConfig())
        totals.append(value(loss))
    assert totals[0] == totals[1]


def test_max_difference_is_clipped():
    probs, lat, y = make_case(4)
    lat = {h: v * 100.0 for h, v in lat.items()}
    tape = nx.Tape()
    cfg = CoopConfig(max_diff_floor=-10.0)
    _, parts = variant_total_loss("max_difference", outputs_from(tape, probs, lat), y, w_leaves(tape, 4), BR, cfg)
    assert parts.l_mdr == -10.0


def test_min_difference_identical_latents():
    probs, _, y = make_case(5)
    z = np.random.default_rng(0).normal(size=(6, 4))
    tape = nx.Tape()
    out = outputs_from(tape, probs, {h: z for h in BR + (FUSION,)})
    _, parts = variant_total_loss("min_difference", out, y, w_leaves(tape, 4), BR, CoopConfig())
    assert parts.l_mdr == 0.0


def test_unknown_variant_is_config_error():
    probs, lat, y = make_case(6)
    tape = nx.Tape()
    with pytest.raises(ConfigError, match="unknown variant"):
        variant_total_loss("sideways", outputs_from(tape, probs, lat), y, w_leaves(tape, 4), BR, CoopConfig())
    with pytest.raises(ConfigError):
        CoopConfig(variant="sideways").validate()
    with pytest.raises(ConfigError):
        CoopConfig(alpha=-1.0).validate()
