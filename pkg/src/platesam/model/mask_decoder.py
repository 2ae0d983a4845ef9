"""Two-way transformer decoder emitting three masks with IoU scores."""

from __future__ import annotations

from typing import Tuple

import torch
from torch import nn

from ..config import ModelConfig
from .common import MLP, Attention, LayerNorm2d, MLPBlock

# The decoder's cross-attentions run at half width; self-attention over the
# token set keeps full width.
_CROSS_DOWNSAMPLE = 2


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image and image->token cross-attention.

    The first block skips adding positional terms in its self-attention
    because queries start out identical to their positional source.
    """

    def __init__(self, dim: int, num_heads: int, skip_first_layer_pe: bool) -> None:
        super().__init__()
        self.skip_first_layer_pe = skip_first_layer_pe
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn_token_to_image = Attention(dim, num_heads, _CROSS_DOWNSAMPLE)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, dim * 4)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_attn_image_to_token = Attention(dim, num_heads, _CROSS_DOWNSAMPLE)
        self.norm4 = nn.LayerNorm(dim)

    def forward(
        self,
        queries: torch.Tensor,
        keys: torch.Tensor,
        query_pe: torch.Tensor,
        key_pe: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.skip_first_layer_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_attn_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_attn_image_to_token(k, q, queries))
        return queries, keys


class MaskDecoder(nn.Module):
    """Decode an embedded image plus prompts into 3 logit maps and 3 scores."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        dim = config.decoder_dim
        heads = config.decoder_heads
        n_masks = config.num_mask_outputs

        self.iou_token = nn.Embedding(1, dim)
        self.mask_tokens = nn.Embedding(n_masks, dim)
        self.blocks = nn.ModuleList(
            TwoWayBlock(dim, heads, skip_first_layer_pe=(i == 0))
            for i in range(config.decoder_depth)
        )
        self.final_attn_token_to_image = Attention(dim, heads, _CROSS_DOWNSAMPLE)
        self.norm_final = nn.LayerNorm(dim)

        self.output_upscaling = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 4, kernel_size=2, stride=2),
            LayerNorm2d(dim // 4),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 4, dim // 8, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.hypernetworks = nn.ModuleList(
            MLP(dim, dim, dim // 8, 3) for _ in range(n_masks)
        )
        # Linear (unbounded) quality head; only the ranking is consumed.
        self.iou_head = nn.Linear(dim, n_masks)

    def forward(
        self,
        src: torch.Tensor,       # [dim, g, g] image embedding with dense prompt added
        image_pe: torch.Tensor,  # [dim, g, g]
        sparse: torch.Tensor,    # [n, dim] prompt tokens
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ([3, 4g, 4g] logits, [3] IoU scores)."""
        dim, g, _ = src.shape
        n_masks = self.config.num_mask_outputs

        out_tokens = torch.cat([self.iou_token.weight, self.mask_tokens.weight], dim=0)
        tokens = torch.cat([out_tokens, sparse], dim=0)

        queries = tokens
        query_pe = tokens
        keys = src.flatten(1).T          # [g*g, dim]
        key_pe = image_pe.flatten(1).T

        for block in self.blocks:
            queries, keys = block(queries, keys, query_pe, key_pe)
        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm_final(queries + self.final_attn_token_to_image(q, k, keys))

        iou_out = queries[0]
        mask_out = queries[1 : 1 + n_masks]

        upscaled = self.output_upscaling(keys.T.reshape(1, dim, g, g)).squeeze(0)
        hyper = torch.stack(
            [net(mask_out[i]) for i, net in enumerate(self.hypernetworks)]
        )  # [3, dim//8]
        logits = torch.einsum("nc,chw->nhw", hyper, upscaled)
        scores = self.iou_head(iou_out)
        return logits, scores
