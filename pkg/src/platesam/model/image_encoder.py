"""ViT-style image encoder producing a dense embedding grid."""

from __future__ import annotations

import torch
from torch import nn

from ..config import ModelConfig
from ..errors import ConfigurationError
from .common import Attention, MLPBlock, grid_position_encoding


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + MLP transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, dim * mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, y)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """Patchify, add fixed sinusoidal positions, run transformer blocks.

    Output is the raw encoder-width grid; the model-level neck projects it to
    the decoder width.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv2d(
            3, config.encoder_dim,
            kernel_size=config.patch_size, stride=config.patch_size,
        )
        g = config.grid_size
        pe = grid_position_encoding(g, g, config.encoder_dim)
        self.register_buffer("pos", pe.flatten(1).T, persistent=False)  # [g*g, dim]
        self.blocks = nn.ModuleList(
            EncoderBlock(config.encoder_dim, config.encoder_heads)
            for _ in range(config.encoder_depth)
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Encode a [3, S, S] canvas into a [encoder_dim, g, g] grid."""
        if image.shape != (3, self.config.image_size, self.config.image_size):
            raise ConfigurationError(
                f"expected image of shape (3, {self.config.image_size}, "
                f"{self.config.image_size}), got {tuple(image.shape)}"
            )
        x = self.patch_embed(image.unsqueeze(0)).squeeze(0)  # [dim, g, g]
        dim, g, _ = x.shape
        tokens = x.flatten(1).T + self.pos
        for block in self.blocks:
            tokens = block(tokens)
        return tokens.T.reshape(dim, g, g)
