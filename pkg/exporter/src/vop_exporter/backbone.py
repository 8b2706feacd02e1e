"""Frozen vision-transformer backbone.

The exporter does not train anything: the backbone is a fixed function
from a 224x224 RGB image to one descriptor per 14x14 patch plus a
global token. Weights come either from a saved state dict or, for
offline and test use, from a seeded deterministic initialization so
that the same seed always yields the same exporter.
"""

from __future__ import annotations

import torch
from torch import nn

IMAGE_SIDE = 224
PATCH_SIDE = 14

# (embed_dim, depth, num_heads); the retrieval engine's stock head
# ingests 1024-wide descriptors, which "large" produces.
VARIANTS = {
    "large": (1024, 24, 16),
    "base": (768, 12, 12),
}
DEFAULT_VARIANT = "large"


class PatchBackbone(nn.Module):
    """Pre-norm ViT encoder returning per-patch tokens and the class token."""

    def __init__(self, embed_dim: int, depth: int, num_heads: int):
        super().__init__()
        side = IMAGE_SIDE // PATCH_SIDE
        self.embed_dim = embed_dim
        self.grid_side = side
        self.patch_embed = nn.Conv2d(3, embed_dim, PATCH_SIDE, stride=PATCH_SIDE)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, side * side + 1, embed_dim))
        layer = nn.TransformerEncoderLayer(
            embed_dim,
            num_heads,
            dim_feedforward=4 * embed_dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """images (B, 3, 224, 224) -> (patch tokens (B, 256, D), cls (B, D))."""
        tokens = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        tokens = self.norm(self.blocks(tokens))
        return tokens[:, 1:, :], tokens[:, 0, :]


def _freeze(model: PatchBackbone) -> PatchBackbone:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def seeded_backbone(
    seed: int, variant: str = DEFAULT_VARIANT, depth: int | None = None
) -> PatchBackbone:
    """Deterministically initialized frozen backbone.

    All weight matrices and token embeddings are drawn N(0, 0.02) from a
    generator seeded only by ``seed``; biases start at zero and norm
    gains at one. ``depth`` overrides the variant's block count, which
    keeps smoke tests fast without changing the descriptor width.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {sorted(VARIANTS)}")
    embed_dim, default_depth, num_heads = VARIANTS[variant]
    model = PatchBackbone(embed_dim, default_depth if depth is None else depth, num_heads)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # named_parameters order is fixed by construction order, so the
        # draw sequence is reproducible across processes
        for name, p in model.named_parameters():
            if p.dim() > 1:
                p.normal_(0.0, 0.02, generator=gen)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.fill_(1.0)
    return _freeze(model)


def load_backbone(
    weights: str, variant: str = DEFAULT_VARIANT, depth: int | None = None
) -> PatchBackbone:
    """Build a frozen backbone from a weights argument.

    ``"seeded:<int>"`` selects the deterministic offline initialization;
    anything else is treated as a path to a torch state dict saved from
    a PatchBackbone of the same variant.
    """
    if weights.startswith("seeded:"):
        return seeded_backbone(int(weights.split(":", 1)[1]), variant, depth)
    embed_dim, default_depth, num_heads = VARIANTS[variant]
    model = PatchBackbone(embed_dim, default_depth if depth is None else depth, num_heads)
    state = torch.load(weights, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    return _freeze(model)
