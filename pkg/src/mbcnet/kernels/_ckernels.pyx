# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: pooled embedding lookup, its scatter-add gradient,
CSR row gathering for multi-valued fields, and tie-aware rank AUC.

Every routine accumulates in exactly the order used by ``_pykernels`` so the
two backends agree bit-for-bit.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def embedding_bag(const double[:, ::1] table, const long long[::1] ids,
                  const long long[::1] offsets):
    cdef Py_ssize_t n_rows = offsets.shape[0] - 1
    cdef Py_ssize_t dim = table.shape[1]
    cdef Py_ssize_t vocab = table.shape[0]
    out_arr = np.zeros((n_rows, dim), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, j, d, start, stop
    cdef long long k
    cdef double n
    for b in range(n_rows):
        start = offsets[b]
        stop = offsets[b + 1]
        if stop == start:
            continue
        for j in range(start, stop):
            k = ids[j]
            if k < 0 or k >= vocab:
                raise IndexError(f"id {k} out of range [0, {vocab}) at row {b}")
            for d in range(dim):
                out[b, d] += table[k, d]
        if stop - start > 1:
            n = <double>(stop - start)
            for d in range(dim):
                out[b, d] = out[b, d] / n
    return out_arr


def embedding_bag_grad(const double[:, ::1] grad, const long long[::1] ids,
                       const long long[::1] offsets, Py_ssize_t vocab):
    cdef Py_ssize_t n_rows = offsets.shape[0] - 1
    cdef Py_ssize_t dim = grad.shape[1]
    out_arr = np.zeros((vocab, dim), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, j, d, start, stop
    cdef long long k
    cdef double n
    for b in range(n_rows):
        start = offsets[b]
        stop = offsets[b + 1]
        n = <double>(stop - start)
        for j in range(start, stop):
            k = ids[j]
            if stop - start > 1:
                for d in range(dim):
                    out[k, d] += grad[b, d] / n
            else:
                for d in range(dim):
                    out[k, d] += grad[b, d]
    return out_arr


def gather_csr(const long long[::1] offsets, const long long[::1] ids,
               const long long[::1] rows):
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t i, j, r, total = 0
    new_off_arr = np.empty(n + 1, dtype=np.int64)
    cdef long long[::1] new_off = new_off_arr
    new_off[0] = 0
    for i in range(n):
        r = rows[i]
        total += offsets[r + 1] - offsets[r]
        new_off[i + 1] = total
    new_ids_arr = np.empty(total, dtype=np.int64)
    cdef long long[::1] new_ids = new_ids_arr
    cdef Py_ssize_t pos = 0
    for i in range(n):
        r = rows[i]
        for j in range(offsets[r], offsets[r + 1]):
            new_ids[pos] = ids[j]
            pos += 1
    return new_off_arr, new_ids_arr


def rank_auc_sorted(const double[::1] sorted_scores, const long long[::1] sorted_labels):
    """AUC from scores already sorted ascending; tied blocks get their mean rank."""
    cdef Py_ssize_t n = sorted_scores.shape[0]
    cdef Py_ssize_t i = 0, j, t
    cdef double rank_sum = 0.0, avg_rank
    cdef long long n_pos = 0, block_pos
    while i < n:
        j = i
        block_pos = 0
        while j < n and sorted_scores[j] == sorted_scores[i]:
            block_pos += sorted_labels[j]
            j += 1
        # ranks are 1-based: block covers ranks i+1 .. j
        avg_rank = 0.5 * (<double>(i + 1) + <double>j)
        rank_sum += avg_rank * <double>block_pos
        n_pos += block_pos
        i = j
    return rank_sum, n_pos
