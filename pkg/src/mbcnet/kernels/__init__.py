"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and ``MBC_PURE_PYTHON`` is
unset; otherwise the numpy implementations are loaded. Both backends produce
bit-identical results. ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("MBC_PURE_PYTHON"):
        raise ImportError("pure-python backend forced")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def embedding_bag(table, ids, offsets, impl=None):
    """Mean-pool table rows per CSR segment; empty segments give zero rows."""
    impl = impl or _impl
    return impl.embedding_bag(np.ascontiguousarray(table, dtype=np.float64), _i64(ids), _i64(offsets))


def embedding_bag_grad(grad, ids, offsets, vocab, impl=None):
    """Scatter-add the pooled-row gradient back onto a ``vocab x dim`` table."""
    impl = impl or _impl
    return impl.embedding_bag_grad(
        np.ascontiguousarray(grad, dtype=np.float64), _i64(ids), _i64(offsets), int(vocab)
    )


def gather_csr(offsets, ids, rows, impl=None):
    """Select ``rows`` out of a CSR (offsets, ids) pair."""
    impl = impl or _impl
    return impl.gather_csr(_i64(offsets), _i64(ids), _i64(rows))


def rank_auc(scores, labels, impl=None):
    """Return (sum of average ranks of positives, positive count)."""
    impl = impl or _impl
    scores = np.ascontiguousarray(scores, dtype=np.float64).ravel()
    labels = _i64(labels).ravel()
    order = np.argsort(scores, kind="mergesort")
    return impl.rank_auc_sorted(np.ascontiguousarray(scores[order]), _i64(labels[order]))


__all__ = ["BACKEND", "embedding_bag", "embedding_bag_grad", "gather_csr", "rank_auc"]
