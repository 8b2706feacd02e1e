"""Patch-embedding database and overlap-vote retrieval.

A database of N images with n patches each becomes a flat array of
N * n unit embeddings. Retrieval runs a pipeline per query image:
optional CLS-descriptor prefilter to a shortlist, exact radius search
around every query patch embedding, TF-IDF patch weighting, then a vote
per database image where each query patch contributes through its best
surviving match. The hard vote counts matched patches; the soft vote
sums similarity margins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import io as vio
from . import kernels
from .errors import ValidationError
from .types import ImageEmbeddings, normalize_rows

DEFAULT_SHORTLIST = 100
RADIUS_SAMPLE_COUNT = 100
MODES = ("hard", "soft")


@dataclass(frozen=True)
class RadiusThreshold:
    epsilon: float

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and -1.0 <= self.epsilon <= 1.0):
            raise ValidationError("radius threshold must be finite in [-1, 1]")


@dataclass(frozen=True)
class OverlapScore:
    query_id: str
    db_id: str
    score: float
    mode: str
    matches: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown vote mode {self.mode!r}")
        if self.score < 0:
            raise ValidationError("overlap score cannot be negative")


@dataclass(frozen=True)
class PatchIndex:
    """Immutable flat store of database patch embeddings.

    Entry row r belongs to image r // n_patches, patch r % n_patches.
    Unrestricted radius queries may go through a space-partition tree;
    either way the result set equals a linear scan.
    """

    entries: np.ndarray
    image_ids: list[str]
    n_patches: int
    cls_embs: np.ndarray | None = None
    tree: kernels.KdTree | None = None

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def degenerate(self) -> np.ndarray:
        return ~np.any(self.entries != 0.0, axis=1)

    def entry_image(self, row: int) -> int:
        return int(row) // self.n_patches

    def entry_patch(self, row: int) -> int:
        return int(row) % self.n_patches

    def image_rows(self, ordinal: int) -> np.ndarray:
        if not 0 <= ordinal < self.n_images:
            raise ValidationError(f"image ordinal {ordinal} out of range")
        return np.arange(ordinal * self.n_patches, (ordinal + 1) * self.n_patches)

    def rows_for_images(self, ordinals) -> np.ndarray:
        """Entry rows of the given images, ascending."""
        ords = np.sort(np.asarray(list(ordinals), dtype=np.int64))
        if ords.size and (ords[0] < 0 or ords[-1] >= self.n_images):
            raise ValidationError("image ordinal out of range")
        offsets = np.arange(self.n_patches, dtype=np.int64)
        return (ords[:, None] * self.n_patches + offsets).ravel()


def build_index(db: list[ImageEmbeddings], structure: str = "auto") -> PatchIndex:
    """Stack database embeddings; entry count is N * n_patches.

    structure picks the acceleration layout: "linear", "tree", or "auto"
    (tree only when the database is large and low-dimensional enough for
    box pruning to pay off). All choices return identical query results.
    """
    if structure not in ("auto", "linear", "tree"):
        raise ValidationError(f"unknown index structure {structure!r}")
    if not db:
        return PatchIndex(np.zeros((0, 1)), [], 0, None, None)
    dims = {e.dim for e in db}
    counts = {e.n_patches for e in db}
    if len(dims) != 1 or len(counts) != 1:
        raise ValidationError("database images disagree on dim or patch count")
    entries = np.ascontiguousarray(
        np.concatenate([e.patch_embs for e in db], axis=0), dtype=np.float64
    )
    cls = None
    if all(e.cls_emb is not None for e in db):
        cls = np.ascontiguousarray(np.stack([e.cls_emb for e in db]), dtype=np.float64)
    use_tree = structure == "tree" or (
        structure == "auto"
        and entries.shape[0] >= kernels.KD_MIN_ENTRIES
        and entries.shape[1] <= kernels.KD_MAX_DIM
    )
    tree = kernels.kd_build(entries) if use_tree and entries.shape[0] else None
    return PatchIndex(entries, [e.image_id for e in db], int(counts.pop()), cls, tree)


def calibrate_radius(
    queries: list[ImageEmbeddings],
    db: list[ImageEmbeddings],
    rng: np.random.Generator,
    sample_count: int = RADIUS_SAMPLE_COUNT,
) -> RadiusThreshold:
    """Median similarity of random (query patch, db patch) pairs, rounded
    to 2 decimals."""
    if not queries or not db:
        raise ValidationError("radius calibration needs images on both sides")
    if sample_count < 1:
        raise ValidationError("sample_count must be positive")
    qi = rng.integers(0, len(queries), size=sample_count)
    di = rng.integers(0, len(db), size=sample_count)
    sims = np.empty(sample_count)
    for s in range(sample_count):
        q = queries[qi[s]]
        d = db[di[s]]
        qp = q.patch_embs[rng.integers(0, q.n_patches)]
        dp = d.patch_embs[rng.integers(0, d.n_patches)]
        sims[s] = kernels.cosine_sims(dp[None, :], qp)[0]
    return RadiusThreshold(float(np.round(np.median(sims), 2)))


def cls_prefilter(query_cls: np.ndarray, index: PatchIndex, shortlist_size: int) -> np.ndarray:
    """Top db ordinals by CLS similarity, ties to the lower ordinal."""
    if index.cls_embs is None:
        raise ValidationError("index has no CLS embeddings to prefilter with")
    if query_cls is None:
        raise ValidationError("query has no CLS embedding")
    if shortlist_size < 1:
        raise ValidationError("shortlist_size must be positive")
    sims = kernels.cosine_sims(index.cls_embs, np.asarray(query_cls, dtype=np.float64))
    order = np.argsort(-sims, kind="stable")
    return order[: min(shortlist_size, index.n_images)]


def radius_neighbors(
    index: PatchIndex,
    query_emb: np.ndarray,
    epsilon: float,
    restrict=None,
):
    """All entries with similarity >= epsilon, exactly.

    Returns (entry rows ascending, similarities). restrict limits the
    search to the given db image ordinals.
    """
    query_emb = np.asarray(query_emb, dtype=np.float64)
    if index.n_images == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    if restrict is not None:
        rows = index.rows_for_images(restrict)
        return kernels.radius_rows(index.entries, query_emb, epsilon, restrict_rows=rows)
    return kernels.radius_rows(index.entries, query_emb, epsilon, tree=index.tree)


def tfidf_weights(neighbor_rows: list, index: PatchIndex) -> np.ndarray:
    """Per-query-patch weight (n_id / n_d) * ln(N / n_i).

    n_id counts all neighbors of the patch (one-to-many), n_i the distinct
    db images among them, n_d = n_patches * N. Patches with no neighbor
    get weight 0; so do patches found in every image.
    """
    n_imgs = index.n_images
    n_d = index.n_patches * n_imgs
    t = np.zeros(len(neighbor_rows))
    if n_d == 0:
        return t
    for p, rows in enumerate(neighbor_rows):
        n_id = len(rows)
        if n_id == 0:
            continue
        n_i = len(np.unique(np.asarray(rows, dtype=np.int64) // index.n_patches))
        t[p] = (n_id / n_d) * math.log(n_imgs / n_i)
    return t


def vote_overlap(
    query: ImageEmbeddings,
    index: PatchIndex,
    db_ordinal: int,
    neighbor_rows: list,
    neighbor_sims: list,
    epsilon: float,
    mode: str = "hard",
    weights: np.ndarray | None = None,
) -> OverlapScore:
    """Overlap vote of one db image from per-patch radius neighbors.

    Each non-degenerate query patch casts through its single best
    neighbor inside the image (similarity ties resolve to the lower patch
    ordinal); degenerate db entries never match. Hard mode adds
    w_p * [sim >= epsilon], soft mode adds w_p * max(sim - epsilon, 0).
    """
    if mode not in MODES:
        raise ValidationError(f"unknown vote mode {mode!r}")
    if len(neighbor_rows) != query.n_patches or len(neighbor_sims) != query.n_patches:
        raise ValidationError("need one neighbor list per query patch")
    if weights is not None and np.any(weights > 0):
        w = np.asarray(weights, dtype=np.float64)
    else:
        w = np.ones(query.n_patches)
    degenerate_db = index.degenerate
    deg_q = query.degenerate
    lo = db_ordinal * index.n_patches
    hi = lo + index.n_patches
    score = 0.0
    matches = []
    for p in range(query.n_patches):
        if deg_q[p]:
            continue
        rows = np.asarray(neighbor_rows[p], dtype=np.int64)
        sims = np.asarray(neighbor_sims[p], dtype=np.float64)
        inside = (rows >= lo) & (rows < hi) & ~degenerate_db[rows]
        if not np.any(inside):
            continue
        rows_in = rows[inside]
        sims_in = sims[inside]
        best = int(np.argmax(sims_in))  # rows ascend, so ties pick lower q
        sim = float(sims_in[best])
        q_ord = int(rows_in[best] - lo)
        matches.append((p, q_ord, sim))
        if mode == "hard":
            score += w[p] * (1.0 if sim >= epsilon else 0.0)
        else:
            score += w[p] * max(sim - epsilon, 0.0)
    return OverlapScore(query.image_id, index.image_ids[db_ordinal], score, mode, matches)


def retrieve_topk(
    query: ImageEmbeddings,
    index: PatchIndex,
    k: int,
    epsilon: float,
    mode: str = "hard",
    weighted: bool = True,
    use_prefilter: bool = True,
    shortlist_size: int = DEFAULT_SHORTLIST,
) -> list[OverlapScore]:
    """Ranked overlap scores for the top db candidates.

    Ordering: score descending, then CLS similarity descending, then the
    lower db ordinal. Prefiltering needs CLS embeddings on both sides and
    silently processes the whole db when disabled.
    """
    if k == 0 or index.n_images == 0:
        return []
    if k < 0:
        raise ValidationError("k cannot be negative")
    if use_prefilter:
        shortlist = cls_prefilter(query.cls_emb, index, shortlist_size)
    else:
        shortlist = np.arange(index.n_images, dtype=np.int64)
    rows_restrict = index.rows_for_images(shortlist)
    sub = np.ascontiguousarray(index.entries[rows_restrict])
    deg_q = query.degenerate
    empty_r = np.empty(0, dtype=np.int64)
    empty_s = np.empty(0)
    neighbor_rows, neighbor_sims = [], []
    for p in range(query.n_patches):
        if deg_q[p]:
            neighbor_rows.append(empty_r)
            neighbor_sims.append(empty_s)
            continue
        sims = kernels.cosine_sims(sub, query.patch_embs[p])
        keep = sims >= epsilon
        neighbor_rows.append(rows_restrict[keep])
        neighbor_sims.append(sims[keep])
    weights = tfidf_weights(neighbor_rows, index) if weighted else None
    scored = [
        vote_overlap(query, index, int(o), neighbor_rows, neighbor_sims, epsilon, mode, weights)
        for o in shortlist
    ]
    if index.cls_embs is not None and query.cls_emb is not None:
        cls_sims = kernels.cosine_sims(index.cls_embs[shortlist], query.cls_emb)
    else:
        cls_sims = np.zeros(len(shortlist))
    order = sorted(
        range(len(scored)),
        key=lambda i: (-scored[i].score, -cls_sims[i], int(shortlist[i])),
    )
    return [scored[i] for i in order[: min(k, len(scored))]]


def pool_patches(emb: ImageEmbeddings, factor: int) -> ImageEmbeddings:
    """Average non-overlapping factor x factor patch blocks, renormalize.

    The patch grid must be square and factor must divide its side;
    factor equal to the side collapses the image to one global patch.
    """
    if factor < 1:
        raise ValidationError("pooling factor must be positive")
    rc = math.isqrt(emb.n_patches)
    if rc * rc != emb.n_patches:
        raise ValidationError(f"{emb.n_patches} patches do not form a square grid")
    if rc % factor != 0:
        raise ValidationError(f"factor {factor} does not divide grid side {rc}")
    if factor == 1:
        return emb
    blocks = emb.patch_embs.reshape(rc // factor, factor, rc // factor, factor, emb.dim)
    pooled = blocks.mean(axis=(1, 3)).reshape(-1, emb.dim)
    return ImageEmbeddings(emb.image_id, normalize_rows(pooled), emb.cls_emb)


# ---------------------------------------------------------------------------
# persistence: VOPF embeddings + JSON sidecar

def sidecar_path(path) -> str:
    return str(path) + ".json"


def save_index(
    index: PatchIndex,
    db: list[ImageEmbeddings],
    path,
    epsilon: float | None = None,
) -> None:
    vio.write_embeddings(db, path)
    meta = {
        "n_images": index.n_images,
        "n_patches": index.n_patches,
        "n_d": index.n_patches * index.n_images,
        "epsilon": epsilon,
    }
    vio.atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_index(path, structure: str = "auto"):
    """Returns (db embeddings, PatchIndex, stored epsilon or None)."""
    db = vio.read_embeddings(path)
    index = build_index(db, structure=structure)
    try:
        meta = json.loads(open(sidecar_path(path), "r", encoding="utf-8").read())
        epsilon = meta.get("epsilon")
    except FileNotFoundError:
        epsilon = None
    if epsilon is not None:
        epsilon = float(epsilon)
    return db, index, epsilon


def results_to_rows(query_id: str, ranked: list[OverlapScore]) -> dict:
    """JSON-lines row for one query's ranked retrieval list."""
    return {
        "query": query_id,
        "ranked": [
            {
                "db": s.db_id,
                "score": s.score,
                "matches": [[p, q, sim] for p, q, sim in s.matches],
            }
            for s in ranked
        ],
    }
