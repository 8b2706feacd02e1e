"""Radius-search kernels: canonical similarity, tree build, backend pick.

The compiled traversal (vop._kernels, Cython) is used when present; set
VOP_PURE_PYTHON=1 to force the NumPy fallback. Backends only generate
candidate rows with conservatively slack bounds; the definitive
similarity and threshold comparison happen here, in one shared code
path, so the retrieved set is identical across backends. Reported
similarities may still differ from other float summation orders by a
last-bit rounding step; set membership is the contract, not the exact
float.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

if os.environ.get("VOP_PURE_PYTHON") == "1":
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _impl

BACKEND = _impl.BACKEND

# Bounding-box bounds are float sums of ~256 terms; their rounding error
# is far below this slack, so no admissible point is ever pruned.
PRUNE_SLACK = 1e-9

KD_LEAF_SIZE = 32
# Box pruning stops paying off as dimensionality grows; past this the
# linear scan wins and "auto" skips the tree entirely.
KD_MAX_DIM = 64
KD_MIN_ENTRIES = 8192


def backend_name() -> str:
    return BACKEND


def cosine_sims(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Canonical cosine similarity of unit rows against a unit query.

    Fixed reduction order (NumPy pairwise row sum) and clipping to
    [-1, 1] make this bit-reproducible for any row subset, which is what
    keeps tree-based and linear retrieval set-identical.
    """
    if rows.size == 0:
        return np.zeros(rows.shape[0])
    return np.clip(np.add.reduce(rows * query, axis=1), -1.0, 1.0)


@dataclass(frozen=True)
class KdTree:
    """Flat array form of a median-split space partition tree."""

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    perm: np.ndarray


def kd_build(points: np.ndarray, leaf_size: int = KD_LEAF_SIZE) -> KdTree:
    """Recursive median split along the widest dimension."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    perm = np.arange(n, dtype=np.int64)
    nodes: list = []

    def split(lo_row: int, hi_row: int) -> int:
        node_id = len(nodes)
        nodes.append(None)
        rows = perm[lo_row:hi_row]
        pts = points[rows]
        box_lo = pts.min(axis=0)
        box_hi = pts.max(axis=0)
        if hi_row - lo_row <= leaf_size:
            nodes[node_id] = (box_lo, box_hi, -1, -1, lo_row, hi_row)
            return node_id
        dim = int(np.argmax(box_hi - box_lo))
        mid = (lo_row + hi_row) // 2
        order = np.argpartition(pts[:, dim], mid - lo_row)
        perm[lo_row:hi_row] = rows[order]
        left = split(lo_row, mid)
        right = split(mid, hi_row)
        nodes[node_id] = (box_lo, box_hi, left, right, lo_row, hi_row)
        return node_id

    if n > 0:
        split(0, n)
    m = len(nodes)
    d = points.shape[1] if points.ndim == 2 else 0
    tree = KdTree(
        lo=np.empty((m, d)),
        hi=np.empty((m, d)),
        left=np.empty(m, dtype=np.int64),
        right=np.empty(m, dtype=np.int64),
        start=np.empty(m, dtype=np.int64),
        end=np.empty(m, dtype=np.int64),
        perm=perm,
    )
    for i, (box_lo, box_hi, left, right, lo_row, hi_row) in enumerate(nodes):
        tree.lo[i] = box_lo
        tree.hi[i] = box_hi
        tree.left[i] = left
        tree.right[i] = right
        tree.start[i] = lo_row
        tree.end[i] = hi_row
    return tree


def kd_candidates(tree: KdTree, query: np.ndarray, epsilon: float) -> np.ndarray:
    """Entry rows that might reach similarity epsilon, superset-exact."""
    return _impl.kd_candidates(
        tree.lo,
        tree.hi,
        tree.left,
        tree.right,
        tree.start,
        tree.end,
        tree.perm,
        np.ascontiguousarray(query, dtype=np.float64),
        epsilon - PRUNE_SLACK,
    )


def radius_rows(
    entries: np.ndarray,
    query: np.ndarray,
    epsilon: float,
    tree: KdTree | None = None,
    restrict_rows: np.ndarray | None = None,
):
    """All rows with canonical similarity >= epsilon, ascending row order.

    Returns (row indices, similarities). A tree only accelerates the
    unrestricted case; restricted queries scan the allowed rows directly.
    """
    if restrict_rows is not None:
        rows = np.asarray(restrict_rows, dtype=np.int64)
        sims = cosine_sims(entries[rows], query)
        keep = sims >= epsilon
        return rows[keep], sims[keep]
    if tree is not None:
        cand = np.sort(kd_candidates(tree, query, epsilon))
        sims = cosine_sims(entries[cand], query)
        keep = sims >= epsilon
        return cand[keep], sims[keep]
    sims = cosine_sims(entries, query)
    rows = np.flatnonzero(sims >= epsilon)
    return rows, sims[rows]
