"""The assembled promptable segmenter: encoder, prompt encoder, decoder, neck."""

from __future__ import annotations

import torch
from torch import nn

from ..config import ModelConfig
from ..errors import ConfigurationError
from .common import grid_position_encoding
from .image_encoder import ImageEncoder
from .mask_decoder import MaskDecoder
from .prompt_encoder import PromptEncoder
from .types import ImageEmbedding, MaskPrediction, PromptEmbedding, PromptSet


class PromptableSegmenter(nn.Module):
    """Three-part segmentation model: image encoder, prompt encoder, mask decoder.

    Weights are immutable during inference; forwards are pure functions of
    (weights, inputs). Every decode yields exactly three (mask, score, logit)
    triplets.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.prompt_encoder = PromptEncoder(config)
        self.mask_decoder = MaskDecoder(config)
        # 1x1 neck projecting encoder width onto the decoder width.
        self.neck = nn.Conv2d(config.encoder_dim, config.decoder_dim, kernel_size=1)
        g = config.grid_size
        self.register_buffer(
            "image_pe", grid_position_encoding(g, g, config.decoder_dim), persistent=False
        )
        self.model_seed: int = 0

    def encode_image(self, image: torch.Tensor) -> ImageEmbedding:
        """Encode a preprocessed [3, S, S] canvas (pre-neck embedding)."""
        return ImageEmbedding(tensor=self.image_encoder(image))

    def encode_prompts(self, prompts: PromptSet) -> PromptEmbedding:
        return self.prompt_encoder(prompts)

    def decode_masks(self, embedding: ImageEmbedding, prompt: PromptEmbedding) -> MaskPrediction:
        g = self.config.grid_size
        if embedding.tensor.shape != (self.config.encoder_dim, g, g):
            raise ConfigurationError(
                f"image embedding shape {tuple(embedding.tensor.shape)} inconsistent "
                f"with config ({self.config.encoder_dim}, {g}, {g})"
            )
        if prompt.sparse.shape[-1] != self.config.decoder_dim:
            raise ConfigurationError("prompt token width inconsistent with decoder_dim")
        src = self.neck(embedding.tensor.unsqueeze(0)).squeeze(0) + prompt.dense
        logits, scores = self.mask_decoder(src, self.image_pe, prompt.sparse)
        return MaskPrediction.from_logits(logits, scores, self.config.image_size)

    def forward(self, image: torch.Tensor, prompts: PromptSet) -> MaskPrediction:
        return self.decode_masks(self.encode_image(image), self.encode_prompts(prompts))


def build_model(config: ModelConfig, seed: int = 0) -> PromptableSegmenter:
    """Construct a segmenter with base weights drawn deterministically from ``seed``.

    Adapter checkpoints store only the low-rank arrays, so the base model must
    be bit-reproducible from (config, seed).
    """
    torch.manual_seed(seed)
    model = PromptableSegmenter(config)
    model.model_seed = seed
    return model
