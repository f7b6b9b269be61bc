"""Branch cooperation losses: co-teaching on disagreement samples, the
orthogonal-transformation differentiation regularizer, fusion, and the
composite objective (with the principle-study variants)."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .branches import FUSION, pair_names
from .errors import ConfigError
from .metrics import per_sample_bce

log = logging.getLogger(__name__)

THRESHOLD = -float(np.log(0.5))

VARIANTS = (
    "moderate",
    "strong_to_weak",
    "weak_to_strong",
    "no_discrimination",
    "max_difference",
    "min_difference",
)
BCT_MODE = {
    "moderate": "strong_to_weak",
    "strong_to_weak": "strong_to_weak",
    "weak_to_strong": "weak_to_strong",
    "no_discrimination": "all",
    "max_difference": "strong_to_weak",
    "min_difference": "strong_to_weak",
}
MDR_MODE = {
    "moderate": "orthogonal",
    "strong_to_weak": "orthogonal",
    "weak_to_strong": "orthogonal",
    "no_discrimination": "orthogonal",
    "max_difference": "max_distance",
    "min_difference": "min_distance",
}


@dataclass
class CoopConfig:
    alpha: float = 0.1
    beta: float = 0.1
    threshold: float = THRESHOLD
    eps_count: float = 1e-8
    mdr_norm: str = "squared"
    max_diff_floor: float = -10.0
    variant: str = "moderate"

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("coop.alpha and coop.beta must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"coop.variant: unknown variant {self.variant!r} (expected one of {list(VARIANTS)})")
        if self.mdr_norm not in ("squared", "unsquared"):
            raise ConfigError("coop.mdr_norm must be 'squared' or 'unsquared'")
        return self


@dataclass
class LossBreakdown:
    total: float
    l_ctr: float
    l_bct: float
    l_mdr: float
    n_selected: int
    per_head: dict = field(default_factory=dict)


def classify_disagreement(p_i, p_j, y, threshold=THRESHOLD):
    """``(I_ij, I_ji)``: I_ij marks samples where i is strong and j is weak.

    Strict inequalities on both sides, so a loss exactly at the threshold
    never selects a sample.
    """
    b_i = per_sample_bce(p_i, y)
    b_j = per_sample_bce(p_j, y)
    return (b_i < threshold) & (b_j > threshold), (b_j < threshold) & (b_i > threshold)


def _teaching_pairs(probs, y, branches, mode, threshold):
    """Yield (student, teacher, rows) triples in a fixed order."""
    n = len(y)
    for i, j in pair_names(branches):
        pi, pj = probs[i].value[:, 0], probs[j].value[:, 0]
        if mode == "all":
            rows = np.arange(n)
            yield i, j, rows
            yield j, i, rows
            continue
        i_strong, j_strong = classify_disagreement(pi, pj, y, threshold)
        if mode == "strong_to_weak":
            yield i, j, np.flatnonzero(j_strong)
            yield j, i, np.flatnonzero(i_strong)
        else:
            # the weak branch's prediction is the label for the strong one
            yield j, i, np.flatnonzero(j_strong)
            yield i, j, np.flatnonzero(i_strong)


def bct_loss(probs, y, branches, config=None, mode="strong_to_weak"):
    """Co-teaching loss and the selected-pair count ``C``.

    ``probs`` maps branch id to a ``B x 1`` probability node. For every
    selected (student, teacher) sample, the student's BCE against the
    teacher's clamped, stop-gradient probability is summed (correctly
    rounded), then divided by ``C + eps_count``.
    """
    config = config or CoopConfig()
    y = np.asarray(y).ravel()
    terms = []
    for student, teacher, rows in _teaching_pairs(probs, y, branches, mode, config.threshold):
        if len(rows) == 0:
            continue
        soft = nx.stop_gradient(nx.take_rows(probs[teacher], rows))
        soft = nx.clip_const(soft, nx.EPS_PROB, 1.0 - nx.EPS_PROB)
        terms.append(nx.bce(nx.take_rows(probs[student], rows), soft))
    tape = next(iter(probs.values())).tape
    if not terms:
        return tape.const(0.0), 0
    count = sum(t.shape[0] for t in terms)
    stacked = terms[0] if len(terms) == 1 else nx.concat_rows(terms)
    return nx.div_const(nx.exact_sum(stacked), count + config.eps_count), count


def bct_loss_reference(p, y, branches, eps_count=1e-8, mode="strong_to_weak", threshold=THRESHOLD):
    """Per-sample loop version of :func:`bct_loss` on plain floats.

    ``p`` maps branch id to a sequence of probabilities.
    """
    eps = nx.EPS_PROB

    def bce1(prob, label):
        prob = min(max(np.float64(prob), eps), 1.0 - eps)
        label = np.float64(label)
        return -(label * np.log(prob) + (1.0 - label) * np.log(1.0 - prob))

    terms = []
    for a in range(len(branches)):
        for b in range(a + 1, len(branches)):
            i, j = branches[a], branches[b]
            for direction in (0, 1):
                for s in range(len(y)):
                    li, lj = bce1(p[i][s], y[s]), bce1(p[j][s], y[s])
                    i_strong = li < threshold and lj > threshold
                    j_strong = lj < threshold and li > threshold
                    if mode == "all":
                        pick = True
                        student, teacher = (i, j) if direction == 0 else (j, i)
                    elif mode == "strong_to_weak":
                        pick = j_strong if direction == 0 else i_strong
                        student, teacher = (i, j) if direction == 0 else (j, i)
                    else:
                        pick = j_strong if direction == 0 else i_strong
                        student, teacher = (j, i) if direction == 0 else (i, j)
                    if pick:
                        soft = min(max(np.float64(p[teacher][s]), eps), 1.0 - eps)
                        terms.append(bce1(p[student][s], soft))
    if not terms:
        return 0.0, 0
    return math.fsum(terms) / (len(terms) + eps_count), len(terms)


def transform(leaves, i, j):
    """``W^{ij}``; the reverse direction is the transpose of the stored matrix."""
    key = f"coop.W.{i}.{j}"
    if key in leaves:
        return leaves[key]
    return nx.transpose(leaves[f"coop.W.{j}.{i}"])


def mdr_loss(latents, leaves, branches, norm="squared"):
    """Mean over ordered pairs of the mapping residual plus the round-trip residual.

    Squared norms (default) are averaged over the batch; ``norm="unsquared"``
    uses per-sample Euclidean norms instead.
    """
    k = len(branches)
    total = None
    for i in branches:
        for j in branches:
            if i == j:
                continue
            zi, zj = latents[i], latents[j]
            w = transform(leaves, i, j)
            mapped = nx.matmul(zi, w)
            back = nx.matmul(mapped, nx.transpose(w))
            for r in (nx.sub(mapped, zj), nx.sub(back, zi)):
                term = _norm_mean(r, norm)
                total = term if total is None else nx.add(total, term)
    return nx.div_const(total, k * (k - 1))


def _norm_mean(r, norm):
    n = r.shape[0]
    if norm == "squared":
        return nx.div_const(nx.l2_sq(r), n)
    return nx.div_const(nx.sum_all(nx.sqrt(nx.sum_cols(nx.square(r)))), n)


def latent_distance(latents, branches):
    """Mean over ordered pairs of the batch-averaged squared latent distance."""
    k = len(branches)
    total = None
    for i in branches:
        for j in branches:
            if i != j:
                term = nx.div_const(nx.l2_sq(nx.sub(latents[i], latents[j])), latents[i].shape[0])
                total = term if total is None else nx.add(total, term)
    return nx.div_const(total, k * (k - 1))


def fuse(latents):
    return nx.mean_cols_stack(list(latents))


def ctr_loss(outputs, y, heads):
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    per_head = {}
    total = None
    for h in heads:
        term = nx.mean_all(nx.bce(outputs[h].prob, y))
        per_head[h] = float(term.value[0, 0])
        total = term if total is None else nx.add(total, term)
    return total, per_head


def variant_total_loss(variant, outputs, y, leaves, branches, config):
    """Composite objective ``L_CTR + alpha * L_BCT + beta * (differentiation term)``.

    Terms whose weight is zero are not built at all, so they contribute no
    gradient and are reported as exactly 0.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r} (expected one of {list(VARIANTS)})")
    heads = list(branches) + ([FUSION] if FUSION in outputs else [])
    loss, per_head = ctr_loss(outputs, y, heads)
    l_ctr = float(loss.value[0, 0])
    l_bct = l_mdr = 0.0
    count = 0
    cooperate = len(branches) >= 2
    if cooperate and config.alpha > 0:
        probs = {b: outputs[b].prob for b in branches}
        bct, count = bct_loss(probs, y, branches, config, BCT_MODE[variant])
        l_bct = float(bct.value[0, 0])
        loss = nx.add(loss, nx.scale(bct, config.alpha))
    if cooperate and config.beta > 0:
        latents = {b: outputs[b].latent for b in branches}
        mode = MDR_MODE[variant]
        if mode == "orthogonal":
            reg = mdr_loss(latents, leaves, branches, config.mdr_norm)
        elif mode == "min_distance":
            reg = latent_distance(latents, branches)
        else:
            reg = nx.clip_const(nx.scale(latent_distance(latents, branches), -1.0), lo=config.max_diff_floor)
        l_mdr = float(reg.value[0, 0])
        loss = nx.add(loss, nx.scale(reg, config.beta))
    return loss, LossBreakdown(float(loss.value[0, 0]), l_ctr, l_bct, l_mdr, count, per_head)


def total_loss(outputs, y, leaves, branches, config):
    return variant_total_loss(config.variant, outputs, y, leaves, branches, config)


def transform_deviation(params, branches):
    """``||W W^T - I||_F`` for each stored pair transform."""
    out = {}
    for a, b in pair_names(branches):
        w = params[f"coop.W.{a}.{b}"]
        out[f"{a}.{b}"] = float(np.linalg.norm(w @ w.T - np.eye(w.shape[0])))
    return out
