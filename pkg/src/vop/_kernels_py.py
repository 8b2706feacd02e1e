"""Pure NumPy fallback for the compiled traversal kernel.

Semantics match vop._kernels exactly: both emit a candidate row superset
that the caller filters with the shared canonical similarity, so result
sets are identical whichever backend is active.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def kd_candidates(lo, hi, left, right, start, end, perm, query, threshold):
    """Collect entry rows from every tree node whose bounding box could
    still contain a point with query dot product >= threshold.

    The node bound is max over the box of the dot product: per dimension
    the larger of query*lo and query*hi, summed.
    """
    if lo.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    out = []
    stack = [0]
    while stack:
        nid = stack.pop()
        bound = float(np.maximum(query * lo[nid], query * hi[nid]).sum())
        if bound < threshold:
            continue
        if left[nid] < 0:
            out.append(perm[start[nid] : end[nid]])
        else:
            stack.append(int(right[nid]))
            stack.append(int(left[nid]))
    if not out:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(out)
