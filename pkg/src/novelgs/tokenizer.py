"""Posed-image patch tokenizer: RGB + Plücker rays (9 channels) -> patch tokens."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

INPUT_CHANNELS = 9


def patchify(features: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(..., H, W, C)`` -> ``(..., H/p, W/p, p*p*C)`` non-overlapping patches."""
    *lead, height, width, channels = features.shape
    if height % patch_size or width % patch_size:
        raise ValueError(
            f"resolution {height}x{width} is not divisible by patch size {patch_size}"
        )
    gh, gw = height // patch_size, width // patch_size
    x = features.reshape(*lead, gh, patch_size, gw, patch_size, channels)
    x = x.movedim(-4, -3)  # (..., gh, gw, p, p, C)
    return x.reshape(*lead, gh, gw, patch_size * patch_size * channels)


class PatchTokenizer(nn.Module):
    """Linear patch embedding plus learnable 2D positional embeddings shared by all views.

    Positional embeddings are stored for ``base_grid`` and bilinearly resized
    when a different resolution comes in (e.g. the second training stage).
    """

    def __init__(self, width: int, patch_size: int, base_resolution: int):
        super().__init__()
        self.patch_size = patch_size
        self.base_grid = base_resolution // patch_size
        self.proj = nn.Linear(INPUT_CHANNELS * patch_size * patch_size, width)
        self.pos_embed = nn.Parameter(torch.zeros(self.base_grid, self.base_grid, width))
        nn.init.normal_(self.pos_embed, std=0.02)

    def positional(self, gh: int, gw: int) -> torch.Tensor:
        if (gh, gw) == tuple(self.pos_embed.shape[:2]):
            return self.pos_embed
        grid = self.pos_embed.permute(2, 0, 1)[None]
        grid = F.interpolate(grid, size=(gh, gw), mode="bilinear", align_corners=False)
        return grid[0].permute(1, 2, 0)

    def forward(self, images: torch.Tensor, raymaps: torch.Tensor) -> torch.Tensor:
        """Tokenize ``(..., V, H, W, 3)`` images with ``(..., V, H, W, 6)`` ray maps.

        Returns a token grid ``(..., V, H/p, W/p, D)``.
        """
        if images.shape[:-1] != raymaps.shape[:-1]:
            raise ValueError(
                f"images {tuple(images.shape)} and ray maps {tuple(raymaps.shape)} are not aligned"
            )
        features = torch.cat([images, raymaps.to(images.dtype)], dim=-1)
        patches = patchify(features, self.patch_size)
        tokens = self.proj(patches)
        return tokens + self.positional(*tokens.shape[-3:-1])


def tokenize(images: torch.Tensor, raymaps: torch.Tensor, patch_size: int,
             tokenizer: PatchTokenizer) -> torch.Tensor:
    if tokenizer.patch_size != patch_size:
        raise ValueError(f"tokenizer was built for patch size {tokenizer.patch_size}, got {patch_size}")
    return tokenizer(images, raymaps)
