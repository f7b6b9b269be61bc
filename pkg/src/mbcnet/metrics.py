"""AUC and LogLoss."""
import numpy as np

from . import kernels
from .errors import UndefinedAUCError
from .numerics import EPS_PROB


def auc(scores, labels):
    """Mann-Whitney AUC; tied positive/negative pairs count one half.

    Raises :class:`UndefinedAUCError` when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores/labels length mismatch: {scores.shape} vs {labels.shape}")
    n = len(labels)
    rank_sum, n_pos = kernels.rank_auc(scores, labels)
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_bruteforce(scores, labels):
    """All-pairs reference AUC (O(P*N)); used as a test oracle."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedAUCError("AUC undefined for single-class labels")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def per_sample_bce(probs, labels, eps=EPS_PROB):
    """Same elementwise expression as ``numerics.bce``."""
    p = np.clip(np.asarray(probs, dtype=np.float64).ravel(), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64).ravel()
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def logloss(probs, labels, eps=EPS_PROB):
    return float(np.mean(per_sample_bce(probs, labels, eps)))
