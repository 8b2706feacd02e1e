"""Directory export into the retrieval engine's feature container.

Every regular file under the image root is attempted; files Pillow
cannot decode are skipped with a warning and listed in a JSON report
next to the output file. Images are bilinearly resized to 224x224 with
no aspect preservation or cropping, so the full frame always maps onto
the 16x16 patch grid. Record ids are paths relative to the image root.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from vop import ImageFeatures, write_features

from .backbone import IMAGE_SIDE, PatchBackbone

# standard ImageNet channel statistics, the convention ViT backbones
# are trained under
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def load_image_tensor(path) -> torch.Tensor:
    """Decode, resize to the fixed input size, and normalize one image."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize(
            (IMAGE_SIDE, IMAGE_SIDE), Image.Resampling.BILINEAR
        )
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - _MEAN) / _STD
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def report_path(out_path) -> str:
    return str(out_path) + ".report.json"


def export_directory(
    model: PatchBackbone, images_dir, out_path, batch_size: int = 8
) -> dict:
    """Export every readable image under images_dir to out_path.

    Inference runs in batches of ``batch_size``; the output file is
    written once, after all batches, from a single thread. An empty or
    fully unreadable directory still produces a valid zero-record file.
    Returns the report that is also written to ``report_path(out_path)``:
    ``{"exported": <count>, "skipped": [<relative paths>]}``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    root = Path(images_dir)
    if not root.is_dir():
        raise NotADirectoryError(f"image directory not found: {root}")

    records: list[ImageFeatures] = []
    skipped: list[str] = []
    pending_ids: list[str] = []
    pending: list[torch.Tensor] = []

    def flush() -> None:
        if not pending:
            return
        with torch.inference_mode():
            patches, cls = model(torch.stack(pending))
        for ident, pat, tok in zip(pending_ids, patches, cls):
            records.append(
                ImageFeatures(ident, np.asarray(pat), np.asarray(tok))
            )
        pending_ids.clear()
        pending.clear()

    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        ident = path.relative_to(root).as_posix()
        try:
            tensor = load_image_tensor(path)
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping unreadable image {ident}: {exc}", stacklevel=2)
            skipped.append(ident)
            continue
        pending_ids.append(ident)
        pending.append(tensor)
        if len(pending) == batch_size:
            flush()
    flush()

    write_features(records, out_path)
    report = {"exported": len(records), "skipped": skipped}
    Path(report_path(out_path)).write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    return report
