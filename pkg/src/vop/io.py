"""File formats: the VOPF feature container, PGM depth maps, JSON manifests.

VOPF layout (all integers little-endian):

    magic "VOPF" | u32 version=1 | u64 image_count
    per image:
        u32 id_len | id (UTF-8) | u32 n_patches | u32 dim | u8 has_cls
        patch data: n_patches * dim float32, row-major
        cls data:   dim float32, only if has_cls

The same container stores backbone features (dim 1024) and trained
embeddings (dim 256). Round-tripping float32 payloads is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError
from .types import (
    CameraModel,
    DepthMap,
    ImageEmbeddings,
    ImageFeatures,
    PatchGrid,
    grid_for_patch_count,
)

FEATURE_MAGIC = b"VOPF"
CHECKPOINT_MAGIC = b"VOPC"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# atomic writes

def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory plus rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# VOPF feature container

def _pack_record(image_id: str, patches: np.ndarray, cls: np.ndarray | None) -> bytes:
    if patches.ndim != 2 or patches.shape[1] < 1:
        raise ValidationError("patch matrix must be 2-D with at least one column")
    if not np.all(np.isfinite(patches)):
        raise ValidationError(f"non-finite patch values in record {image_id!r}")
    ident = image_id.encode("utf-8")
    pat = np.ascontiguousarray(patches, dtype="<f4")
    parts = [
        struct.pack("<I", len(ident)),
        ident,
        struct.pack("<IIB", pat.shape[0], pat.shape[1], 1 if cls is not None else 0),
        pat.tobytes(),
    ]
    if cls is not None:
        if cls.ndim != 1 or cls.shape[0] != pat.shape[1]:
            raise ValidationError(f"cls vector dimension mismatch in record {image_id!r}")
        if not np.all(np.isfinite(cls)):
            raise ValidationError(f"non-finite cls values in record {image_id!r}")
        parts.append(np.ascontiguousarray(cls, dtype="<f4").tobytes())
    return b"".join(parts)


def write_features(records: list[ImageFeatures], path) -> None:
    """Serialize feature records; read_features(write_features(x)) == x bit-exactly."""
    blob = [FEATURE_MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(records))]
    for rec in records:
        blob.append(_pack_record(rec.image_id, rec.patch_feats, rec.cls_feat))
    atomic_write_bytes(path, b"".join(blob))


def write_embeddings(records: list[ImageEmbeddings], path) -> None:
    """Serialize embeddings in the same container, rounded to float32."""
    blob = [FEATURE_MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(records))]
    for rec in records:
        blob.append(
            _pack_record(
                rec.image_id,
                rec.patch_embs.astype("<f4"),
                None if rec.cls_emb is None else rec.cls_emb.astype("<f4"),
            )
        )
    atomic_write_bytes(path, b"".join(blob))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"{self.path}: truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def _read_raw_records(path) -> list[tuple[str, np.ndarray, np.ndarray | None]]:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic, not a feature file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = r.u64()
    records = []
    for _ in range(count):
        ident = r.take(r.u32()).decode("utf-8")
        n_patches = r.u32()
        dim = r.u32()
        if dim < 1:
            raise ValidationError(f"{path}: record {ident!r} has zero dimension")
        has_cls = r.u8()
        pat = np.frombuffer(r.take(4 * n_patches * dim), dtype="<f4")
        pat = pat.reshape(n_patches, dim)
        cls = None
        if has_cls:
            cls = np.frombuffer(r.take(4 * dim), dtype="<f4").copy()
        if not np.all(np.isfinite(pat)) or (cls is not None and not np.all(np.isfinite(cls))):
            raise ValidationError(f"{path}: record {ident!r} contains non-finite values")
        records.append((ident, pat.copy(), cls))
    if r.pos != len(data):
        raise CorruptionError(f"{path}: {len(data) - r.pos} trailing bytes")
    return records


def read_features(path) -> list[ImageFeatures]:
    """Read all records as ImageFeatures (grid inferred from the patch count)."""
    out = []
    for ident, pat, cls in _read_raw_records(path):
        grid = grid_for_patch_count(pat.shape[0])
        out.append(ImageFeatures(ident, pat, cls, grid))
    return out


def read_embeddings(path) -> list[ImageEmbeddings]:
    """Read all records as unit-normalized ImageEmbeddings."""
    return [
        ImageEmbeddings(ident, pat, cls) for ident, pat, cls in _read_raw_records(path)
    ]


# ---------------------------------------------------------------------------
# encoder checkpoints
#
# Layout: magic "VOPC" | u32 version=1 | u32 n_dims | u32*n_dims layer dims |
# f32 dropout_rate | per layer: weights (d_in*d_out f32 row-major), bias.

def write_checkpoint(layer_dims, dropout_rate: float, weights, biases, path) -> None:
    dims = [int(d) for d in layer_dims]
    blob = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", FORMAT_VERSION, len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
        struct.pack("<f", dropout_rate),
    ]
    for w, b in zip(weights, biases):
        blob.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        blob.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(blob))


def read_checkpoint(path):
    """Returns (layer_dims, dropout_rate, weights, biases) with float64 params."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n_dims = r.u32()
    if n_dims < 2:
        raise ValidationError(f"{path}: checkpoint needs at least two layer dims")
    dims = list(struct.unpack(f"<{n_dims}I", r.take(4 * n_dims)))
    dropout = struct.unpack("<f", r.take(4))[0]
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(r.take(4 * d_in * d_out), dtype="<f4")
        weights.append(w.reshape(d_in, d_out).astype(np.float64))
        b = np.frombuffer(r.take(4 * d_out), dtype="<f4")
        biases.append(b.astype(np.float64))
    if r.pos != len(data):
        raise CorruptionError(f"{path}: {len(data) - r.pos} trailing bytes")
    return dims, float(dropout), weights, biases


# ---------------------------------------------------------------------------
# 16-bit PGM depth maps

def write_depth_pgm(depth: DepthMap, path, scale: float) -> None:
    """Store depth / scale as big-endian 16-bit PGM (P5); zeros stay invalid."""
    vals = np.round(depth.depth / scale)
    if np.any(vals > 65535):
        raise ValidationError("depth exceeds 16-bit range at this scale")
    header = f"P5\n{depth.width} {depth.height}\n65535\n".encode("ascii")
    atomic_write_bytes(path, header + vals.astype(">u2").tobytes())


def read_depth_pgm(path, scale: float) -> DepthMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM file")
    # header tokens: P5, width, height, maxval; '#' comments allowed
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptionError(f"{path}: malformed PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 65535:
        raise FormatError(f"{path}: expected 16-bit PGM, maxval={maxval}")
    raw = data[pos:]
    if len(raw) < 2 * width * height:
        raise CorruptionError(f"{path}: truncated PGM payload")
    vals = np.frombuffer(raw[: 2 * width * height], dtype=">u2")
    return DepthMap(vals.reshape(height, width).astype(np.float64) * scale)


# ---------------------------------------------------------------------------
# dataset manifests

@dataclass(frozen=True)
class ManifestImage:
    image_id: str
    scene: str | None = None
    camera: CameraModel | None = None
    depth_path: Path | None = None
    depth_scale: float = 1.0

    def load_depth(self) -> DepthMap:
        if self.depth_path is None:
            raise ValidationError(f"image {self.image_id!r} has no depth map")
        return read_depth_pgm(self.depth_path, self.depth_scale)


@dataclass(frozen=True)
class Manifest:
    grid: PatchGrid
    feature_files: list[Path]
    images: list[ManifestImage]
    pairs: list[tuple[str, str]] | None = None

    def image(self, image_id: str) -> ManifestImage:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise ValidationError(f"unknown image id {image_id!r}")

    def supervision_pairs(self) -> list[tuple[str, str]]:
        """Explicit pair list, or every unordered pair of posed images."""
        if self.pairs is not None:
            return list(self.pairs)
        posed = [
            im.image_id
            for im in self.images
            if im.camera is not None and im.depth_path is not None
        ]
        return [(a, b) for i, a in enumerate(posed) for b in posed[i + 1 :]]


def _camera_from_json(obj) -> CameraModel:
    try:
        rot = np.asarray(obj["rotation"], dtype=np.float64).reshape(3, 3)
        tr = np.asarray(obj["translation"], dtype=np.float64)
        intr = np.asarray(obj["intrinsics"], dtype=np.float64).reshape(3, 3)
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"malformed camera entry: {exc}") from exc
    return CameraModel(rot, tr, intr)


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
    base = path.parent
    try:
        grid_obj = obj["grid"]
        grid = PatchGrid(int(grid_obj["image_side"]), int(grid_obj["patch_side"]))
        images = []
        for entry in obj["images"]:
            cam = _camera_from_json(entry["camera"]) if "camera" in entry else None
            depth = entry.get("depth")
            images.append(
                ManifestImage(
                    image_id=str(entry["id"]),
                    scene=entry.get("scene"),
                    camera=cam,
                    depth_path=(base / depth["path"]) if depth else None,
                    depth_scale=float(depth["scale"]) if depth else 1.0,
                )
            )
        feature_files = [base / p for p in obj.get("feature_files", [])]
        pairs = None
        if "pairs" in obj:
            pairs = [(str(a), str(b)) for a, b in obj["pairs"]]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed manifest: {exc}") from exc
    seen = set()
    for im in images:
        if im.image_id in seen:
            raise ValidationError(f"{path}: duplicate image id {im.image_id!r}")
        seen.add(im.image_id)
    return Manifest(grid=grid, feature_files=feature_files, images=images, pairs=pairs)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    base = path.parent
    obj = {
        "grid": {
            "image_side": manifest.grid.image_side,
            "patch_side": manifest.grid.patch_side,
        },
        "feature_files": [os.path.relpath(p, base) for p in manifest.feature_files],
        "images": [],
    }
    for im in manifest.images:
        entry = {"id": im.image_id}
        if im.scene is not None:
            entry["scene"] = im.scene
        if im.camera is not None:
            entry["camera"] = {
                "rotation": [float(x) for x in im.camera.rotation.ravel()],
                "translation": [float(x) for x in im.camera.translation],
                "intrinsics": [float(x) for x in im.camera.intrinsics.ravel()],
            }
        if im.depth_path is not None:
            entry["depth"] = {
                "path": os.path.relpath(im.depth_path, base),
                "scale": im.depth_scale,
            }
        obj["images"].append(entry)
    if manifest.pairs is not None:
        obj["pairs"] = [[a, b] for a, b in manifest.pairs]
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# JSON lines helpers

def write_jsonl(rows, path) -> None:
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    atomic_write_text(path, text)


def read_jsonl(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: invalid JSON line") from exc
    return rows
