from .common import Attention
from .segmenter import PromptableSegmenter, build_model
from .types import (
    BACKGROUND,
    FOREGROUND,
    ImageEmbedding,
    MaskPrediction,
    PromptEmbedding,
    PromptSet,
    upsample_logits,
)

__all__ = [
    "Attention",
    "PromptableSegmenter",
    "build_model",
    "ImageEmbedding",
    "MaskPrediction",
    "PromptEmbedding",
    "PromptSet",
    "FOREGROUND",
    "BACKGROUND",
    "upsample_logits",
]
