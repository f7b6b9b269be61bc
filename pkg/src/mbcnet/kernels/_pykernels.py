"""Pure numpy implementations of the hot kernels.

Same contracts and accumulation order as the compiled ``_ckernels`` module.
"""
import numpy as np


def _segments(offsets):
    lengths = np.diff(offsets)
    seg = np.repeat(np.arange(len(lengths)), lengths)
    return lengths, seg


def embedding_bag(table, ids, offsets):
    n_rows = len(offsets) - 1
    vocab, dim = table.shape
    if len(ids) and (ids.min() < 0 or ids.max() >= vocab):
        j = int(np.flatnonzero((ids < 0) | (ids >= vocab))[0])
        row = int(np.searchsorted(offsets, j, side="right") - 1)
        raise IndexError(f"id {ids[j]} out of range [0, {vocab}) at row {row}")
    lengths, seg = _segments(offsets)
    if n_rows == len(ids) and np.all(lengths == 1):
        return table[ids].copy()
    rows = table[ids]
    out = np.empty((n_rows, dim))
    for d in range(dim):
        out[:, d] = np.bincount(seg, weights=rows[:, d], minlength=n_rows)
    multi = lengths > 1
    out[multi] /= lengths[multi, None]
    return out


def embedding_bag_grad(grad, ids, offsets, vocab):
    dim = grad.shape[1]
    lengths, seg = _segments(offsets)
    per_id = grad[seg]
    multi = lengths[seg] > 1
    per_id[multi] /= lengths[seg][multi, None]
    out = np.empty((vocab, dim))
    for d in range(dim):
        out[:, d] = np.bincount(ids, weights=per_id[:, d], minlength=vocab)
    return out


def gather_csr(offsets, ids, rows):
    lengths = offsets[rows + 1] - offsets[rows]
    new_off = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(lengths, out=new_off[1:])
    if new_off[-1] == 0:
        return new_off, np.zeros(0, dtype=np.int64)
    starts = np.repeat(offsets[rows] - new_off[:-1], lengths)
    new_ids = ids[np.arange(new_off[-1]) + starts]
    return new_off, new_ids


def rank_auc_sorted(sorted_scores, sorted_labels):
    n = len(sorted_scores)
    # block boundaries of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    stops = np.r_[starts[1:], n]
    avg_rank = 0.5 * ((starts + 1).astype(np.float64) + stops)
    block_pos = np.add.reduceat(sorted_labels, starts)
    # half-integer products: exact in float64, so the sum is order independent
    return float(np.dot(avg_rank, block_pos)), int(block_pos.sum())
