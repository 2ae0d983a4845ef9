"""Prompt encoder: points and boxes to sparse tokens, mask priors to a dense map."""

from __future__ import annotations

import torch
from torch import nn

from ..config import ModelConfig
from .common import LayerNorm2d, point_position_encoding
from .types import PromptEmbedding, PromptSet

# Label-embedding slots: 0 background point, 1 foreground point,
# 2 box top-left corner, 3 box bottom-right corner.
_N_LABELS = 4
_BOX_TOPLEFT = 2
_BOX_BOTTOMRIGHT = 3


class PromptEncoder(nn.Module):
    """Embed prompt geometry for the mask decoder.

    Every point becomes one sparse token (sinusoidal position + learned label
    embedding); a box becomes two corner tokens. A dense mask prior is pushed
    through a small strided conv stem down to the embedding grid; when no mask
    prompt is given, a learned "no mask" embedding is broadcast instead.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        dim = config.decoder_dim
        self.label_embed = nn.Embedding(_N_LABELS, dim)
        self.no_mask_embed = nn.Embedding(1, dim)
        # mask_prompt_size is 4x the grid, so two stride-2 convs land exactly
        # on the embedding resolution.
        self.mask_stem = nn.Sequential(
            nn.Conv2d(1, 4, kernel_size=2, stride=2),
            LayerNorm2d(4),
            nn.GELU(),
            nn.Conv2d(4, 16, kernel_size=2, stride=2),
            LayerNorm2d(16),
            nn.GELU(),
            nn.Conv2d(16, dim, kernel_size=1),
        )

    def _point_token(self, x: float, y: float, label: int) -> torch.Tensor:
        pe = point_position_encoding(
            torch.tensor([[x, y]], dtype=torch.float32),
            self.config.decoder_dim,
            self.config.patch_size,
        )
        return pe[0] + self.label_embed.weight[label]

    def forward(self, prompts: PromptSet) -> PromptEmbedding:
        prompts.validate(self.config.image_size, self.config.mask_prompt_size)
        dim = self.config.decoder_dim
        g = self.config.grid_size

        tokens = []
        for x, y, label in prompts.points:
            tokens.append(self._point_token(x, y, label))
        for x1, y1, x2, y2 in prompts.boxes:
            tokens.append(self._point_token(x1, y1, _BOX_TOPLEFT))
            tokens.append(self._point_token(x2, y2, _BOX_BOTTOMRIGHT))
        sparse = torch.stack(tokens) if tokens else torch.zeros((0, dim))

        mask = prompts.mask_tensor()
        if mask is None:
            dense = self.no_mask_embed.weight.reshape(dim, 1, 1).expand(dim, g, g)
        else:
            dense = self.mask_stem(mask.unsqueeze(0).unsqueeze(0)).squeeze(0)
        return PromptEmbedding(sparse=sparse, dense=dense)
