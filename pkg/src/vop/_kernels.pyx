# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled tree-traversal kernel for exact radius search.

Emits the same candidate rows as vop._kernels_py; the caller applies the
shared canonical similarity filter, so the two backends return identical
result sets.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def kd_candidates(
    double[:, ::1] lo,
    double[:, ::1] hi,
    cnp.int64_t[::1] left,
    cnp.int64_t[::1] right,
    cnp.int64_t[::1] start,
    cnp.int64_t[::1] end,
    cnp.int64_t[::1] perm,
    double[::1] query,
    double threshold,
):
    """Candidate entry rows whose node bounding box admits a dot product
    of at least `threshold` with `query`."""
    cdef Py_ssize_t m = lo.shape[0]
    cdef Py_ssize_t d = lo.shape[1]
    cdef cnp.ndarray out_arr = np.empty(perm.shape[0], dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef cnp.ndarray stack_arr = np.empty(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] stack = stack_arr
    cdef Py_ssize_t sp = 0
    cdef Py_ssize_t n_out = 0
    cdef Py_ssize_t nid, k, i
    cdef double bound, via_lo, via_hi
    if m == 0:
        return out_arr[:0].copy()
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        nid = stack[sp]
        bound = 0.0
        for k in range(d):
            via_lo = query[k] * lo[nid, k]
            via_hi = query[k] * hi[nid, k]
            bound += via_lo if via_lo > via_hi else via_hi
        if bound < threshold:
            continue
        if left[nid] < 0:
            for i in range(start[nid], end[nid]):
                out[n_out] = perm[i]
                n_out += 1
        else:
            stack[sp] = right[nid]
            sp += 1
            stack[sp] = left[nid]
            sp += 1
    return out_arr[:n_out].copy()
