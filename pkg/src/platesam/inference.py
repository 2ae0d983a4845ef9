"""Inference strategies: prompt-free prediction and iterative mask refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError
from .model import MaskPrediction, PromptSet


@dataclass
class InferenceConfig:
    refine_iters: int = 1          # extra mask-prompted passes after the first
    binarize_threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.refine_iters < 0:
            raise ConfigurationError("refine_iters must be >= 0")


@dataclass
class PredictionResult:
    """Selection over the three decoded levels (argmax quality score)."""

    selected_mask: np.ndarray   # bool [S, S] canvas mask
    selected_score: float
    selected_level: int
    all_levels: MaskPrediction
    iterations_used: int = 1


def _select(pred: MaskPrediction, iterations_used: int) -> PredictionResult:
    scores = pred.iou_scores.detach().numpy()
    level = int(np.argmax(scores))  # ties resolve to the lowest index
    return PredictionResult(
        selected_mask=pred.masks[level].numpy(),
        selected_score=float(scores[level]),
        selected_level=level,
        all_levels=pred,
        iterations_used=iterations_used,
    )


def _forward(model, image: torch.Tensor, prompts: PromptSet, threshold: float) -> MaskPrediction:
    with torch.no_grad():
        pred = model(image, prompts)
    if threshold != 0.0:
        pred = pred.with_threshold(image.shape[-1], threshold)
    return pred


def predict(model, image: torch.Tensor, cfg: InferenceConfig = InferenceConfig()) -> PredictionResult:
    """One prompt-free forward; pick the level with the highest quality score."""
    return _select(_forward(model, image, PromptSet(), cfg.binarize_threshold), 1)


def predict_refined(model, image: torch.Tensor, cfg: InferenceConfig = InferenceConfig()) -> PredictionResult:
    """Iterative refinement: feed the best level's logits back as a mask prompt.

    No points are used at inference (there is no ground truth to sample
    corrections from); the prompt is the raw logit map of the previous best
    level. Runs refine_iters extra passes after the initial prompt-free one.
    """
    pred = _forward(model, image, PromptSet(), cfg.binarize_threshold)
    for _ in range(cfg.refine_iters):
        level = int(np.argmax(pred.iou_scores.detach().numpy()))
        prompt = PromptSet(mask_logits=pred.logits[level].detach())
        pred = _forward(model, image, prompt, cfg.binarize_threshold)
    return _select(pred, cfg.refine_iters + 1)


def predict_with_prompts(
    model,
    image: torch.Tensor,
    prompts: PromptSet,
    cfg: InferenceConfig = InferenceConfig(),
) -> PredictionResult:
    """Single forward with caller-supplied prompts (ablation entry point)."""
    return _select(_forward(model, image, prompts, cfg.binarize_threshold), 1)
