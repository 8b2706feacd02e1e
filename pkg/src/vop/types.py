"""Core domain types: patch grids, per-image features/embeddings, cameras, depth.

All types are immutable after construction and safe to share across threads.
Validation happens in ``__post_init__`` so an instance that exists is an
instance that satisfies its invariants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# Pixel geometry of the canonical input resolution: square images tiled by
# square patches. 224 / 14 = 16 rows and columns, 256 patches.
DEFAULT_IMAGE_SIDE = 224
DEFAULT_PATCH_SIDE = 14

# Rows whose pre-normalization L2 norm falls below this are left as zero
# vectors ("degenerate") instead of being normalized.
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class PatchGrid:
    """Uniform n-by-n tiling of a square image.

    Patch index p maps to (row, col) = (p // rows_cols, p % rows_cols); the
    mapping is a bijection on [0, n_patches).
    """

    image_side: int
    patch_side: int

    def __post_init__(self):
        if self.image_side <= 0 or self.patch_side <= 0:
            raise ValidationError("grid sides must be positive")
        if self.image_side % self.patch_side != 0:
            raise ValidationError(
                f"image side {self.image_side} is not a multiple of "
                f"patch side {self.patch_side}"
            )

    @property
    def rows_cols(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.rows_cols * self.rows_cols

    def to_row_col(self, patch: int) -> tuple[int, int]:
        if not 0 <= patch < self.n_patches:
            raise ValidationError(f"patch index {patch} out of range")
        return patch // self.rows_cols, patch % self.rows_cols

    def to_patch(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows_cols and 0 <= col < self.rows_cols):
            raise ValidationError(f"row/col ({row}, {col}) out of range")
        return row * self.rows_cols + col


def default_grid() -> PatchGrid:
    return PatchGrid(DEFAULT_IMAGE_SIDE, DEFAULT_PATCH_SIDE)


def grid_for_patch_count(n_patches: int) -> PatchGrid:
    """Canonical grid for a record that only knows its patch count.

    Feature files carry no pixel metadata, so readers reconstruct a square
    grid with the default patch side. Geometry code always receives explicit
    grids from dataset manifests instead.
    """
    rc = math.isqrt(n_patches)
    if rc * rc != n_patches:
        raise ValidationError(f"patch count {n_patches} is not a perfect square")
    return PatchGrid(rc * DEFAULT_PATCH_SIDE, DEFAULT_PATCH_SIDE)


def _as_float_matrix(a, name: str, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise ValidationError(f"{name} must have at least one column")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class ImageFeatures:
    """Backbone patch features for one image, plus the optional global token.

    ``patch_feats`` is (n_patches, d) float32 in row-major patch order;
    ``cls_feat`` is a d-vector or None. Values are stored in float32 because
    that is the on-disk interchange precision.
    """

    image_id: str
    patch_feats: np.ndarray
    cls_feat: np.ndarray | None = None
    grid: PatchGrid = field(default_factory=default_grid)

    def __post_init__(self):
        feats = _as_float_matrix(self.patch_feats, "patch_feats", np.float32)
        if feats.shape[0] != self.grid.n_patches:
            raise ValidationError(
                f"patch_feats has {feats.shape[0]} rows, grid expects "
                f"{self.grid.n_patches}"
            )
        object.__setattr__(self, "patch_feats", feats)
        if self.cls_feat is not None:
            cls = np.ascontiguousarray(self.cls_feat, dtype=np.float32)
            if cls.ndim != 1 or cls.shape[0] != feats.shape[1]:
                raise ValidationError("cls_feat dimension mismatch")
            if not np.all(np.isfinite(cls)):
                raise ValidationError("cls_feat contains non-finite values")
            object.__setattr__(self, "cls_feat", cls)

    @property
    def dim(self) -> int:
        return self.patch_feats.shape[1]

    @property
    def n_patches(self) -> int:
        return self.patch_feats.shape[0]


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    """L2-normalize rows in float64; rows below the degenerate cutoff stay zero."""
    out = np.ascontiguousarray(mat, dtype=np.float64).copy()
    norms = np.linalg.norm(out, axis=1)
    ok = norms >= DEGENERATE_NORM
    out[ok] /= norms[ok, None]
    out[~ok] = 0.0
    return out


@dataclass(frozen=True)
class ImageEmbeddings:
    """Unit-norm patch embeddings for one image.

    Rows are L2-normalized at construction (float64), so a plain inner
    product between rows is their cosine similarity. Rows with negligible
    input norm are kept as all-zero and reported by ``degenerate``; they
    never form matches.
    """

    image_id: str
    patch_embs: np.ndarray
    cls_emb: np.ndarray | None = None

    def __post_init__(self):
        embs = _as_float_matrix(self.patch_embs, "patch_embs", np.float64)
        object.__setattr__(self, "patch_embs", normalize_rows(embs))
        if self.cls_emb is not None:
            cls = np.ascontiguousarray(self.cls_emb, dtype=np.float64)
            if cls.ndim != 1 or cls.shape[0] != embs.shape[1]:
                raise ValidationError("cls_emb dimension mismatch")
            if not np.all(np.isfinite(cls)):
                raise ValidationError("cls_emb contains non-finite values")
            n = np.linalg.norm(cls)
            cls = cls / n if n >= DEGENERATE_NORM else np.zeros_like(cls)
            object.__setattr__(self, "cls_emb", cls)

    @property
    def dim(self) -> int:
        return self.patch_embs.shape[1]

    @property
    def n_patches(self) -> int:
        return self.patch_embs.shape[0]

    @property
    def degenerate(self) -> np.ndarray:
        """Boolean mask of all-zero rows."""
        return ~np.any(self.patch_embs != 0.0, axis=1)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: world-to-camera rotation R, translation t, intrinsics K.

    A world point X maps to camera coordinates R @ X + t and then to the
    image plane through K with perspective division.
    """

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: np.ndarray

    _ORTHO_TOL = 1e-9

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64)
        k = np.ascontiguousarray(self.intrinsics, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,) or k.shape != (3, 3):
            raise ValidationError("camera matrices have wrong shapes")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t)) and np.all(np.isfinite(k))):
            raise ValidationError("camera parameters contain non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > self._ORTHO_TOL:
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > self._ORTHO_TOL:
            raise ValidationError("rotation determinant is not +1")
        if k[1, 0] != 0.0 or k[2, 0] != 0.0 or k[2, 1] != 0.0:
            raise ValidationError("intrinsics must be upper triangular")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0 or k[2, 2] <= 0.0:
            raise ValidationError("intrinsics diagonal must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "intrinsics", k)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in scene units; 0 marks an invalid measurement."""

    depth: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValidationError("depth must be a 2-D array")
        if not np.all(np.isfinite(d)):
            raise ValidationError("depth contains non-finite values")
        if np.any(d < 0):
            raise ValidationError("depth values must be non-negative")
        object.__setattr__(self, "depth", d)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]
