"""Patch-overlap image retrieval.

Images are represented by one embedding per grid patch. Retrieval
approximates how much two images overlap by letting every query patch
vote through its radius-search matches in the database, which is more
robust to viewpoint change than a single global descriptor. Supervision
for the embedding head comes from camera geometry: patches are matched
when enough depth-lifted pixels reproject consistently between views.
"""

from .errors import (
    CorruptionError,
    FormatError,
    NumericalError,
    SamplingError,
    ValidationError,
    VopError,
)
from .types import (
    CameraModel,
    DepthMap,
    ImageEmbeddings,
    ImageFeatures,
    PatchGrid,
    default_grid,
    grid_for_patch_count,
    normalize_rows,
)
from .io import (
    read_checkpoint,
    read_depth_pgm,
    read_embeddings,
    read_features,
    read_jsonl,
    read_manifest,
    write_checkpoint,
    write_depth_pgm,
    write_embeddings,
    write_features,
    write_jsonl,
    write_manifest,
)
from .geometry import (
    GtMatchSet,
    OverlapMatrix,
    build_supervision_depth,
    build_supervision_matches,
    image_overlap,
    overlap_from_points,
    patch_of_pixel,
    project_point,
    sample_negatives,
)
from .encoder import (
    EncoderHead,
    augment_features,
    contrastive_loss,
    embed_image,
    gelu,
    head_forward,
    init_head,
    load_head,
    save_head,
)
from .training import (
    LossConfig,
    TrainDataset,
    TrainState,
    init_train_state,
    sample_batch,
    train,
)
from .index import (
    OverlapScore,
    PatchIndex,
    RadiusThreshold,
    build_index,
    calibrate_radius,
    cls_prefilter,
    load_index,
    pool_patches,
    radius_neighbors,
    retrieve_topk,
    save_index,
    tfidf_weights,
    vote_overlap,
)
from .posegraph import (
    PoseGraphRun,
    UnionFind,
    constant_verifier,
    make_overlap_verifier,
    run_pose_graph,
)
from .metrics import RetrievalMetrics, compute_metrics
from .kernels import backend_name

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "CorruptionError",
    "DepthMap",
    "EncoderHead",
    "FormatError",
    "GtMatchSet",
    "ImageEmbeddings",
    "ImageFeatures",
    "LossConfig",
    "NumericalError",
    "OverlapMatrix",
    "OverlapScore",
    "PatchGrid",
    "PatchIndex",
    "PoseGraphRun",
    "RadiusThreshold",
    "RetrievalMetrics",
    "SamplingError",
    "TrainDataset",
    "TrainState",
    "UnionFind",
    "ValidationError",
    "VopError",
    "augment_features",
    "backend_name",
    "build_index",
    "build_supervision_depth",
    "build_supervision_matches",
    "calibrate_radius",
    "cls_prefilter",
    "compute_metrics",
    "constant_verifier",
    "contrastive_loss",
    "default_grid",
    "embed_image",
    "gelu",
    "grid_for_patch_count",
    "head_forward",
    "image_overlap",
    "init_head",
    "init_train_state",
    "load_head",
    "load_index",
    "make_overlap_verifier",
    "normalize_rows",
    "overlap_from_points",
    "patch_of_pixel",
    "pool_patches",
    "project_point",
    "radius_neighbors",
    "read_checkpoint",
    "read_depth_pgm",
    "read_embeddings",
    "read_features",
    "read_jsonl",
    "read_manifest",
    "retrieve_topk",
    "run_pose_graph",
    "sample_batch",
    "sample_negatives",
    "save_head",
    "save_index",
    "tfidf_weights",
    "train",
    "vote_overlap",
    "write_checkpoint",
    "write_depth_pgm",
    "write_embeddings",
    "write_features",
    "write_jsonl",
    "write_manifest",
]
