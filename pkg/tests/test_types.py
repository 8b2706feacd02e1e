import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vop.errors import ValidationError
from vop.types import (
    CameraModel,
    DepthMap,
    ImageEmbeddings,
    ImageFeatures,
    PatchGrid,
    default_grid,
    grid_for_patch_count,
    normalize_rows,
)


def test_default_grid_shape():
    g = default_grid()
    assert g.rows_cols == 16
    assert g.n_patches == 256


def test_grid_rejects_non_divisible():
    with pytest.raises(ValidationError):
        PatchGrid(225, 14)
    with pytest.raises(ValidationError):
        PatchGrid(0, 14)
    with pytest.raises(ValidationError):
        PatchGrid(224, -1)


@given(st.integers(min_value=1, max_value=40), st.integers(min_value=1, max_value=20))
def test_grid_index_bijection(rows_cols, patch_side):
    g = PatchGrid(rows_cols * patch_side, patch_side)
    for patch in range(g.n_patches):
        r, c = g.to_row_col(patch)
        assert 0 <= r < g.rows_cols and 0 <= c < g.rows_cols
        assert g.to_patch(r, c) == patch


def test_grid_index_out_of_range():
    g = default_grid()
    with pytest.raises(ValidationError):
        g.to_row_col(256)
    with pytest.raises(ValidationError):
        g.to_patch(16, 0)


def test_grid_for_patch_count_canonical():
    g = grid_for_patch_count(256)
    assert (g.image_side, g.patch_side) == (224, 14)
    g = grid_for_patch_count(64)
    assert g.rows_cols == 8
    with pytest.raises(ValidationError):
        grid_for_patch_count(50)  # not a perfect square


def test_image_features_casts_and_validates():
    feats = ImageFeatures("a", np.ones((256, 32)))
    assert feats.patch_feats.dtype == np.float32
    assert feats.dim == 32
    with pytest.raises(ValidationError):
        ImageFeatures("a", np.ones((100, 32)))  # row count vs grid
    bad = np.ones((256, 8))
    bad[3, 4] = np.nan
    with pytest.raises(ValidationError):
        ImageFeatures("a", bad)
    with pytest.raises(ValidationError):
        ImageFeatures("a", np.ones((256, 4)), cls_feat=np.ones(5))


def test_normalize_rows_units_and_zeros():
    mat = np.array([[3.0, 4.0], [0.0, 0.0], [1e-13, 0.0]])
    out = normalize_rows(mat)
    assert np.allclose(out[0], [0.6, 0.8])
    assert np.all(out[1] == 0.0)
    assert np.all(out[2] == 0.0)  # below the degenerate guard stays zero


@given(st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=25)
def test_embeddings_rows_unit_or_zero(seed):
    rng = np.random.default_rng(seed)
    mat = rng.normal(size=(10, 16)) * rng.choice([0.0, 1.0, 100.0], size=(10, 1))
    emb = ImageEmbeddings("x", mat)
    norms = np.linalg.norm(emb.patch_embs, axis=1)
    zero_rows = ~np.any(mat != 0.0, axis=1)
    assert np.allclose(norms[~zero_rows], 1.0, atol=1e-12)
    assert np.all(norms[zero_rows] == 0.0)
    assert np.array_equal(emb.degenerate, zero_rows)


def test_camera_model_validation():
    intr = np.array([[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]])
    cam = CameraModel(np.eye(3), np.zeros(3), intr)
    assert cam.rotation.shape == (3, 3)
    with pytest.raises(ValidationError):
        CameraModel(np.eye(3) * 2.0, np.zeros(3), intr)  # not orthonormal
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValidationError):
        CameraModel(refl, np.zeros(3), intr)  # det -1
    low = intr.copy()
    low[1, 0] = 3.0
    with pytest.raises(ValidationError):
        CameraModel(np.eye(3), np.zeros(3), low)  # not upper triangular


def test_depth_map_validation():
    d = DepthMap(np.zeros((4, 6)))
    assert (d.height, d.width) == (4, 6)
    with pytest.raises(ValidationError):
        DepthMap(np.full((4, 4), -1.0))
    with pytest.raises(ValidationError):
        DepthMap(np.full((4, 4), np.inf))
