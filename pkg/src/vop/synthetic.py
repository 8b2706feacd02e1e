"""Synthetic scenes and datasets for tests, benchmarks, and demos.

Two constructions:

* A textured ground plane observed by a grid of downward-facing cameras.
  Camera spacing is an exact multiple of the patch footprint, so patches
  of different cameras either cover the same world tile or disjoint
  ones, and every quantity (overlap counts, match labels) has a closed
  form. Patch features are per-tile latent vectors plus noise.

* A separable pair dataset: image pairs whose matched patches share a
  latent 1024-dim vector plus Gaussian noise, grouped into scenes, with
  cross-scene pairs as guaranteed negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as vio
from .errors import ValidationError
from .geometry import GtMatchSet
from .types import CameraModel, DepthMap, ImageFeatures, PatchGrid, grid_for_patch_count

PLANE_CAMERA_HEIGHT = 2.0
PLANE_FOCAL = 224.0
TILE_SIZE = 0.125  # world size of one 14 px patch at height 2 with f=224


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via QR with sign fix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def random_camera(rng: np.random.Generator, grid: PatchGrid) -> CameraModel:
    """Random pose looking roughly at the origin, mid-range focal."""
    rot = random_rotation(rng)
    center = rng.normal(scale=2.0, size=3)
    focal = rng.uniform(150.0, 300.0)
    pp = grid.image_side / 2.0
    intr = np.array([[focal, 0.0, pp], [0.0, focal, pp], [0.0, 0.0, 1.0]])
    return CameraModel(rot, -rot @ center, intr)


# ---------------------------------------------------------------------------
# plane scene

@dataclass(frozen=True)
class PlaneScene:
    grid: PatchGrid
    image_ids: list
    cameras: list
    depths: list
    features: list
    points: np.ndarray  # tile-center 3D points, one per world tile
    camera_tiles: list  # (row offset, col offset) of each camera in tile units

    def camera_of(self, image_id: str) -> CameraModel:
        return self.cameras[self.image_ids.index(image_id)]

    def shared_tiles(self, a: int, b: int) -> int:
        """Closed-form count of world tiles visible in both cameras."""
        rc = self.grid.rows_cols
        dr = abs(self.camera_tiles[a][0] - self.camera_tiles[b][0])
        dc = abs(self.camera_tiles[a][1] - self.camera_tiles[b][1])
        return max(rc - dr, 0) * max(rc - dc, 0)


def plane_scene(
    seed: int,
    nx: int = 5,
    ny: int = 4,
    spacing_tiles: int = 6,
    noise: float = 0.05,
    feat_dim: int = 1024,
    grid: PatchGrid | None = None,
) -> PlaneScene:
    """Grid of nx * ny downward cameras over a tiled plane at z=0.

    Cameras sit at height 2 with R = diag(1,-1,-1); each sees a
    rows_cols x rows_cols block of world tiles, shifted by spacing_tiles
    tiles between neighboring cameras, which is pixel-exact: a world
    tile always fills a whole patch. Patch features equal the latent
    vector of the tile they image, plus per-camera Gaussian noise.
    """
    if grid is None:
        grid = PatchGrid(224, 14)
    rng = np.random.default_rng(seed)
    rc = grid.rows_cols
    tiles_x = rc + spacing_tiles * (nx - 1)
    tiles_y = rc + spacing_tiles * (ny - 1)
    latents = rng.normal(size=(tiles_y, tiles_x, feat_dim))

    rot = np.diag([1.0, -1.0, -1.0])
    pp = grid.image_side / 2.0
    intr = np.array([[PLANE_FOCAL, 0.0, pp], [0.0, PLANE_FOCAL, pp], [0.0, 0.0, 1.0]])
    half = grid.image_side / 2.0 / PLANE_FOCAL * PLANE_CAMERA_HEIGHT  # = 1.0
    step = spacing_tiles * TILE_SIZE

    ids, cams, depths, feats, offsets = [], [], [], [], []
    depth_const = DepthMap(np.full((grid.image_side, grid.image_side), PLANE_CAMERA_HEIGHT))
    for j in range(ny):
        for i in range(nx):
            center = np.array([step * i, -step * j, PLANE_CAMERA_HEIGHT])
            cams.append(CameraModel(rot, -rot @ center, intr))
            ids.append(f"cam_{j}_{i}")
            depths.append(depth_const)
            offsets.append((spacing_tiles * j, spacing_tiles * i))
            block = latents[
                spacing_tiles * j : spacing_tiles * j + rc,
                spacing_tiles * i : spacing_tiles * i + rc,
            ].reshape(rc * rc, feat_dim)
            noisy = block + rng.normal(scale=noise, size=block.shape)
            feats.append(
                ImageFeatures(ids[-1], noisy, noisy.mean(axis=0), grid)
            )

    # one 3D point in the middle of every world tile
    xs = -half + TILE_SIZE * (np.arange(tiles_x) + 0.5)
    ys = half - TILE_SIZE * (np.arange(tiles_y) + 0.5)
    gx, gy = np.meshgrid(xs, ys)
    points = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    return PlaneScene(grid, ids, cams, depths, feats, points, offsets)


def write_scene(scene: PlaneScene, out_dir, depth_scale: float = 1e-3) -> Path:
    """Materialize a plane scene as manifest + features + depth files.

    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(exist_ok=True)
    feat_path = out_dir / "features.vopf"
    vio.write_features(scene.features, feat_path)
    images = []
    for ident, cam, depth in zip(scene.image_ids, scene.cameras, scene.depths):
        depth_path = out_dir / "depth" / f"{ident}.pgm"
        vio.write_depth_pgm(depth, depth_path, depth_scale)
        images.append(
            vio.ManifestImage(
                image_id=ident,
                scene="plane",
                camera=cam,
                depth_path=depth_path,
                depth_scale=depth_scale,
            )
        )
    manifest = vio.Manifest(
        grid=scene.grid, feature_files=[feat_path], images=images
    )
    path = out_dir / "manifest.json"
    vio.write_manifest(manifest, path)
    return path


# ---------------------------------------------------------------------------
# separable pair dataset

def separable_pair_dataset(
    seed: int,
    n_scenes: int = 40,
    pairs_per_scene: int = 10,
    n_patches: int = 64,
    feat_dim: int = 1024,
    noise: float = 0.05,
    overlap_low: float = 0.10,
    overlap_high: float = 0.70,
):
    """Image pairs whose matched patches share a latent plus noise.

    Returns (records, features): per-scene positive pairs with an
    overlap fraction drawn inside [overlap_low, overlap_high], plus one
    zero-overlap cross-scene record per positive record. Patches without
    a partner get independent latents.
    """
    if n_scenes < 2:
        raise ValidationError("need at least two scenes for cross-scene negatives")
    rng = np.random.default_rng(seed)
    grid = grid_for_patch_count(n_patches)
    lo = int(np.ceil(overlap_low * n_patches))
    hi = int(np.floor(overlap_high * n_patches))
    records: list[GtMatchSet] = []
    features: dict[str, ImageFeatures] = {}
    first_image: list[str] = []
    for s in range(n_scenes):
        for t in range(pairs_per_scene):
            id_a = f"s{s:02d}_p{t:02d}_a"
            id_b = f"s{s:02d}_p{t:02d}_b"
            n_pos = int(rng.integers(lo, hi + 1))
            ps = rng.permutation(n_patches)[:n_pos]
            qs = rng.permutation(n_patches)[:n_pos]
            feats_a = rng.normal(size=(n_patches, feat_dim))
            feats_b = rng.normal(size=(n_patches, feat_dim))
            shared = rng.normal(size=(n_pos, feat_dim))
            feats_a[ps] = shared + rng.normal(scale=noise, size=shared.shape)
            feats_b[qs] = shared + rng.normal(scale=noise, size=shared.shape)
            features[id_a] = ImageFeatures(id_a, feats_a, grid=grid)
            features[id_b] = ImageFeatures(id_b, feats_b, grid=grid)
            pairs = [(int(p), int(q), True) for p, q in zip(ps, qs)]
            records.append(GtMatchSet(id_a, id_b, pairs, n_pos / n_patches))
            if t == 0:
                first_image.append(id_a)
    for s in range(n_scenes):
        for t in range(pairs_per_scene):
            records.append(
                GtMatchSet(f"s{s:02d}_p{t:02d}_a", first_image[(s + 1) % n_scenes], [], 0.0)
            )
    return records, features
