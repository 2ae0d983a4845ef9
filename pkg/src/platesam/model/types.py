"""Wire types passed between the model components."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ValidationError

FOREGROUND = 1
BACKGROUND = 0


@dataclass
class ImageEmbedding:
    """Encoder output: [encoder_dim, grid, grid] feature map (pre-neck)."""

    tensor: torch.Tensor


@dataclass
class PromptEmbedding:
    """Encoded prompts: sparse tokens [n, decoder_dim] and a dense grid map."""

    sparse: torch.Tensor
    dense: torch.Tensor


@dataclass
class PromptSet:
    """A (possibly empty) set of segmentation prompts in canvas pixels.

    ``points`` are (x, y, label) with label 1=foreground, 0=background.
    ``boxes`` are (x1, y1, x2, y2). ``mask_logits`` is a dense prior at
    mask-prompt resolution. An entirely empty PromptSet encodes the
    prompt-free mode.
    """

    points: Sequence[Tuple[float, float, int]] = ()
    boxes: Sequence[Tuple[float, float, float, float]] = ()
    mask_logits: Optional[object] = None  # numpy array or torch tensor [m, m]

    @property
    def is_empty(self) -> bool:
        return not self.points and not self.boxes and self.mask_logits is None

    def validate(self, image_size: int, mask_prompt_size: int) -> None:
        for x, y, label in self.points:
            if not (0 <= x < image_size and 0 <= y < image_size):
                raise ValidationError(f"point ({x}, {y}) outside [0, {image_size})")
            if label not in (FOREGROUND, BACKGROUND):
                raise ValidationError(f"point label must be 0 or 1, got {label!r}")
        for x1, y1, x2, y2 in self.boxes:
            if not (x1 < x2 and y1 < y2):
                raise ValidationError(f"box ({x1}, {y1}, {x2}, {y2}) must satisfy x1<x2, y1<y2")
            if x1 < 0 or y1 < 0 or x2 > image_size or y2 > image_size:
                raise ValidationError(f"box ({x1}, {y1}, {x2}, {y2}) outside canvas")
        if self.mask_logits is not None:
            arr = self.mask_logits
            shape = tuple(arr.shape)
            if shape != (mask_prompt_size, mask_prompt_size):
                raise ValidationError(
                    f"mask prompt must be {mask_prompt_size}x{mask_prompt_size}, got {shape}"
                )

    def mask_tensor(self) -> Optional[torch.Tensor]:
        if self.mask_logits is None:
            return None
        if isinstance(self.mask_logits, torch.Tensor):
            return self.mask_logits.float()
        return torch.as_tensor(np.asarray(self.mask_logits), dtype=torch.float32)


@dataclass
class MaskPrediction:
    """Three-level decoder output, index-aligned across fields.

    ``logits`` live at mask-prompt resolution; ``masks`` are the bilinearly
    upsampled logits thresholded on the canvas.
    """

    masks: torch.Tensor       # bool [3, S, S]
    iou_scores: torch.Tensor  # float [3]
    logits: torch.Tensor      # float [3, m, m]

    @classmethod
    def from_logits(
        cls,
        logits: torch.Tensor,
        iou_scores: torch.Tensor,
        image_size: int,
        threshold: float = 0.0,
    ) -> "MaskPrediction":
        masks = upsample_logits(logits, image_size) > threshold
        return cls(masks=masks, iou_scores=iou_scores, logits=logits)

    def with_threshold(self, image_size: int, threshold: float) -> "MaskPrediction":
        """Re-binarize all three levels at a different logit threshold."""
        return MaskPrediction.from_logits(self.logits, self.iou_scores, image_size, threshold)


def upsample_logits(logits: torch.Tensor, image_size: int) -> torch.Tensor:
    """Bilinearly upsample [3, m, m] logit maps to canvas resolution."""
    return F.interpolate(
        logits.unsqueeze(0), size=(image_size, image_size),
        mode="bilinear", align_corners=False,
    ).squeeze(0)
