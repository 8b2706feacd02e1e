"""Geometric ground truth: patch overlap counts and patch match labels.

Overlap between two views is counted through patches: a 3D point votes for
the pair (p, q) when it projects inside patch p of the first image and
patch q of the second. Match labels for training come either from posed
depth maps (pixels lifted to 3D, cycle checked) or from externally matched
pixel correspondences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .types import CameraModel, DepthMap, PatchGrid

SUPERVISION_STRIDE = 4
CYCLE_TOL_PX = 2.0
DEPTH_TOL_REL = 0.05
MATCH_MIN_COUNT = 5


@dataclass(frozen=True)
class OverlapMatrix:
    """Per-patch-pair co-visible point counts for one ordered image pair."""

    counts: np.ndarray
    image_pair: tuple[str, str]

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ValidationError("overlap counts must be a 2-D matrix")
        if not np.issubdtype(counts.dtype, np.integer):
            raise ValidationError("overlap counts must be integers")
        if np.any(counts < 0):
            raise ValidationError("overlap counts must be non-negative")
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True)
class GtMatchSet:
    """Labeled patch pairs for an image pair.

    pairs holds (p, q, label) triples. Positive pairs are one-to-one:
    no p and no q appears in more than one positive. overlap_fraction is
    the fraction of first-image patches that have a positive partner.
    """

    image_i: str
    image_j: str
    pairs: list = field(default_factory=list)
    overlap_fraction: float = 0.0

    def __post_init__(self):
        seen_p, seen_q = set(), set()
        for p, q, label in self.pairs:
            if label:
                if p in seen_p or q in seen_q:
                    raise ValidationError(
                        f"positive pairs not one-to-one at patch ({p},{q})"
                    )
                seen_p.add(p)
                seen_q.add(q)
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValidationError("overlap_fraction outside [0,1]")

    @property
    def positives(self) -> list[tuple[int, int]]:
        return [(p, q) for p, q, label in self.pairs if label]

    @property
    def negatives(self) -> list[tuple[int, int]]:
        return [(p, q) for p, q, label in self.pairs if not label]

    def with_negatives(self, negs) -> "GtMatchSet":
        pos = set(self.positives)
        extra = []
        for p, q in negs:
            if (p, q) in pos:
                raise ValidationError(f"({p},{q}) is already a positive pair")
            extra.append((int(p), int(q), False))
        return GtMatchSet(
            self.image_i, self.image_j, list(self.pairs) + extra, self.overlap_fraction
        )


def match_set_to_row(ms: GtMatchSet) -> dict:
    return {
        "i": ms.image_i,
        "j": ms.image_j,
        "pos": [[p, q] for p, q in ms.positives],
        "neg_sampled": [[p, q] for p, q in ms.negatives],
        "overlap_fraction": ms.overlap_fraction,
    }


def match_set_from_row(row: dict) -> GtMatchSet:
    try:
        pairs = [(int(p), int(q), True) for p, q in row["pos"]]
        pairs += [(int(p), int(q), False) for p, q in row["neg_sampled"]]
        return GtMatchSet(str(row["i"]), str(row["j"]), pairs, float(row["overlap_fraction"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed match record: {exc}") from exc


# ---------------------------------------------------------------------------
# projection

def project_point(point, cam: CameraModel):
    """Project a world point; None when it lies behind the camera."""
    pc = cam.rotation @ np.asarray(point, dtype=np.float64) + cam.translation
    if pc[2] <= 0:
        return None
    h = cam.intrinsics @ pc
    return np.array([h[0] / h[2], h[1] / h[2]])


def patch_of_pixel(px, grid: PatchGrid):
    """Patch index under the floor convention; None outside the image.

    A coordinate exactly on a patch's left or top edge belongs to that
    patch; x == image_side is already outside.
    """
    x, y = float(px[0]), float(px[1])
    if not (0.0 <= x < grid.image_side and 0.0 <= y < grid.image_side):
        return None
    row = int(y // grid.patch_side)
    col = int(x // grid.patch_side)
    return row * grid.rows_cols + col


def _project_batch(points, cam: CameraModel, side: int):
    """Vectorized projection of a (3, m) stack.

    Returns (px, py, z, ok) where ok marks points in front of the camera
    and inside the image bounds.
    """
    pc = cam.rotation @ points + cam.translation[:, None]
    z = pc[2]
    ok = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        h = cam.intrinsics @ pc
        px = h[0] / h[2]
        py = h[1] / h[2]
    ok &= np.isfinite(px) & np.isfinite(py)
    ok &= (px >= 0) & (px < side) & (py >= 0) & (py < side)
    return px, py, z, ok


def overlap_from_points(points, cam_i: CameraModel, cam_j: CameraModel, grid: PatchGrid) -> OverlapMatrix:
    """Count, per (p, q), the 3D points visible in patch p of i and q of j."""
    n = grid.n_patches
    counts = np.zeros((n, n), dtype=np.int64)
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return OverlapMatrix(counts, ("", ""))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError("points must be an (m, 3) array")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("points contain non-finite values")
    pts = pts.T
    side, patch, rc = grid.image_side, grid.patch_side, grid.rows_cols
    xi, yi, _, ok_i = _project_batch(pts, cam_i, side)
    xj, yj, _, ok_j = _project_batch(pts, cam_j, side)
    ok = ok_i & ok_j
    p = (yi[ok] // patch).astype(np.int64) * rc + (xi[ok] // patch).astype(np.int64)
    q = (yj[ok] // patch).astype(np.int64) * rc + (xj[ok] // patch).astype(np.int64)
    np.add.at(counts, (p, q), 1)
    return OverlapMatrix(counts, ("", ""))


def image_overlap(m: OverlapMatrix) -> tuple[int, list[tuple[int, int]]]:
    """Total overlap score and the per-patch best correspondence set.

    Every nonzero row p contributes its argmax column (ties resolved to
    the lowest q); the score sums the counts over those cells.
    """
    counts = m.counts
    rows = np.flatnonzero(counts.max(axis=1) > 0)
    best = counts[rows].argmax(axis=1)
    corr = [(int(p), int(q)) for p, q in zip(rows, best)]
    score = int(counts[rows, best].sum())
    return score, corr


# ---------------------------------------------------------------------------
# depth-based supervision

def _directional_counts(
    depth_src: DepthMap,
    depth_dst: DepthMap,
    cam_src: CameraModel,
    cam_dst: CameraModel,
    grid: PatchGrid,
    stride: int,
    tau_px: float,
    tau_d: float,
) -> np.ndarray:
    """Correspondence counts per (src patch, dst patch).

    Pixels of the source image are sampled on a stride grid, lifted by the
    source depth, projected into the destination, then kept only when the
    looked-up destination depth agrees (relative tolerance tau_d) and the
    round trip back to the source lands within tau_px pixels.
    """
    side = grid.image_side
    coords = np.arange(0, side, stride, dtype=np.float64)
    xs, ys = (a.ravel() for a in np.meshgrid(coords, coords))
    d = depth_src.depth[ys.astype(np.int64), xs.astype(np.int64)]
    ok = d > 0

    kinv_src = np.linalg.inv(cam_src.intrinsics)
    rays = kinv_src @ np.stack([xs, ys, np.ones_like(xs)])
    world = cam_src.rotation.T @ (rays * d - cam_src.translation[:, None])

    px, py, z, ok_j = _project_batch(world, cam_dst, side)
    ok &= ok_j
    safe_px = np.where(np.isfinite(px), px, 0.0)
    safe_py = np.where(np.isfinite(py), py, 0.0)
    ix = np.clip(np.rint(safe_px), 0, side - 1).astype(np.int64)
    iy = np.clip(np.rint(safe_py), 0, side - 1).astype(np.int64)
    dd = depth_dst.depth[iy, ix]
    ok &= dd > 0
    ok &= np.abs(z - dd) <= tau_d * dd

    # round trip: lift the projected pixel with the destination depth
    kinv_dst = np.linalg.inv(cam_dst.intrinsics)
    rays_back = kinv_dst @ np.stack([safe_px, safe_py, np.ones_like(safe_px)])
    world_back = cam_dst.rotation.T @ (rays_back * dd - cam_dst.translation[:, None])
    bx, by, _, ok_back = _project_batch(world_back, cam_src, side)
    ok &= ok_back
    ok &= np.hypot(xs - bx, ys - by) < tau_px

    n = grid.n_patches
    counts = np.zeros((n, n), dtype=np.int64)
    patch, rc = grid.patch_side, grid.rows_cols
    p = (ys[ok] // patch).astype(np.int64) * rc + (xs[ok] // patch).astype(np.int64)
    q = (py[ok] // patch).astype(np.int64) * rc + (px[ok] // patch).astype(np.int64)
    np.add.at(counts, (p, q), 1)
    return counts


def _row_best(counts: np.ndarray, min_count: int) -> set[tuple[int, int]]:
    """Per-row argmax pairs kept when the winning count exceeds min_count.

    argmax takes the first maximum, so count ties resolve to the lower
    column index.
    """
    best = counts.argmax(axis=1)
    rows = np.flatnonzero(counts[np.arange(counts.shape[0]), best] > min_count)
    return {(int(r), int(best[r])) for r in rows}


def build_supervision_depth(
    id_i: str,
    id_j: str,
    depth_i: DepthMap,
    depth_j: DepthMap,
    cam_i: CameraModel,
    cam_j: CameraModel,
    grid: PatchGrid,
    stride: int = SUPERVISION_STRIDE,
    tau_px: float = CYCLE_TOL_PX,
    tau_d: float = DEPTH_TOL_REL,
) -> GtMatchSet:
    """Patch match labels from posed depth maps.

    Labels are built in both directions (i to j and j to i) and
    intersected, which enforces mutual-best agreement on top of the
    per-direction one-to-one assignment.
    """
    side = grid.image_side
    for name, dm in (("i", depth_i), ("j", depth_j)):
        if dm.depth.shape != (side, side):
            raise ValidationError(
                f"depth map {name} is {dm.depth.shape}, expected ({side}, {side})"
            )
    fwd = _directional_counts(depth_i, depth_j, cam_i, cam_j, grid, stride, tau_px, tau_d)
    bwd = _directional_counts(depth_j, depth_i, cam_j, cam_i, grid, stride, tau_px, tau_d)
    pos_fwd = _row_best(fwd, 0)
    pos_bwd = {(p, q) for q, p in _row_best(bwd, 0)}
    positives = sorted(pos_fwd & pos_bwd)
    pairs = [(p, q, True) for p, q in positives]
    return GtMatchSet(id_i, id_j, pairs, len(positives) / grid.n_patches)


def build_supervision_matches(
    correspondences,
    grid: PatchGrid,
    min_count: int = MATCH_MIN_COUNT,
    id_i: str = "",
    id_j: str = "",
) -> GtMatchSet:
    """Patch match labels from precomputed pixel correspondences.

    A patch pair counts as positive only when strictly more than min_count
    correspondences fall into it, then mutual-best one-to-one assignment
    is applied on the count matrix.
    """
    n = grid.n_patches
    counts = np.zeros((n, n), dtype=np.int64)
    for (xi, yi), (xj, yj) in correspondences:
        p = patch_of_pixel((xi, yi), grid)
        q = patch_of_pixel((xj, yj), grid)
        if p is None or q is None:
            raise ValidationError(f"correspondence pixel outside image bounds")
        counts[p, q] += 1
    pos_fwd = _row_best(counts, min_count)
    pos_bwd = {(p, q) for q, p in _row_best(counts.T, min_count)}
    positives = sorted(pos_fwd & pos_bwd)
    pairs = [(p, q, True) for p, q in positives]
    return GtMatchSet(id_i, id_j, pairs, len(positives) / n)


def sample_negatives(
    positives,
    n_patches_i: int,
    n_patches_j: int,
    count: int,
    rng: np.random.Generator,
) -> list[tuple[int, int]]:
    """Uniform sample of non-positive patch pairs, ascending (p, q) order."""
    if count <= 0:
        return []
    pos_flat = np.array(
        [p * n_patches_j + q for p, q in positives], dtype=np.int64
    )
    pool = np.setdiff1d(np.arange(n_patches_i * n_patches_j, dtype=np.int64), pos_flat)
    sel = rng.choice(pool, size=min(count, pool.size), replace=False)
    sel.sort()
    return [(int(s) // n_patches_j, int(s) % n_patches_j) for s in sel]
