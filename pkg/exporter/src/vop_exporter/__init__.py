"""Feature exporter: frozen ViT patch descriptors -> vop feature files.

Walks an image directory, runs every readable image through a frozen
vision-transformer backbone at a fixed 224x224 input size, and writes
one record per image (256 patch descriptors plus a global descriptor)
in the binary format the retrieval engine ingests.
"""

from .backbone import PatchBackbone, load_backbone, seeded_backbone
from .export import export_directory, load_image_tensor

__all__ = [
    "PatchBackbone",
    "export_directory",
    "load_backbone",
    "load_image_tensor",
    "seeded_backbone",
]
