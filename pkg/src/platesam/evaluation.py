"""Mask-to-detection conversion and the detection metric suite.

Precision = TP/(TP+FP), Recall = TP/(TP+FN), F1 = 2PR/(P+R), and AP is the
area under the all-points-interpolated precision-recall curve swept over
detection scores. Matching is greedy one-to-one in descending score order at
a configurable IoU threshold (default 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data import Box, CanvasTransform, Sample, canvas_gt_mask, preprocess, untransform_boxes
from .errors import ValidationError
from .inference import InferenceConfig, predict, predict_refined

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    min_area: int = 16            # canvas px; drops speckle components
    refine: Optional[int] = None  # None: plain predict; N: refined with N passes
    binarize_threshold: float = 0.0


@dataclass
class Detection:
    box: Box
    score: float
    image_id: str = ""


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    det_flags: Tuple[bool, ...]   # per detection, descending-score order
    iou_threshold: float


@dataclass
class DetectionReport:
    precision: float
    recall: float
    f1: float
    ap: float
    pr_curve: List[Tuple[float, float]]
    iou_threshold: float = 0.5
    n_images: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def to_json(self) -> str:
        payload = {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "ap": self.ap, "iou_threshold": self.iou_threshold,
            "n_images": self.n_images, "tp": self.tp, "fp": self.fp, "fn": self.fn,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def mask_to_detections(
    mask: np.ndarray,
    score_source: float,
    transform: CanvasTransform,
    min_area: int = 16,
    image_id: str = "",
) -> List[Detection]:
    """Tight boxes of 8-connected components, mapped back to original pixels."""
    labeled, count = ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT_CONNECTED)
    detections = []
    for index, sl in enumerate(ndimage.find_objects(labeled), start=1):
        if sl is None:
            continue
        area = int((labeled[sl] == index).sum())
        if area < min_area:
            continue
        canvas_box = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
        box = untransform_boxes([canvas_box], transform)[0]
        detections.append(Detection(box=box, score=float(score_source), image_id=image_id))
    return detections


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def match(dets: Sequence[Detection], gts: Sequence[Box], iou_threshold: float) -> MatchResult:
    """Greedy one-to-one matching in descending score order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    flags = []
    tp = 0
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            value = iou(dets[i].box, gt)
            if value > best_iou:
                best_iou, best_j = value, j
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            tp += 1
            flags.append(True)
        else:
            flags.append(False)
    return MatchResult(
        tp=tp, fp=len(dets) - tp, fn=len(gts) - tp,
        det_flags=tuple(flags), iou_threshold=iou_threshold,
    )


def precision_recall_f1(m: MatchResult) -> Tuple[float, float, float]:
    """Eq. forms with the 0/0 -> 0 convention."""
    p = m.tp / (m.tp + m.fp) if (m.tp + m.fp) > 0 else 0.0
    r = m.tp / (m.tp + m.fn) if (m.tp + m.fn) > 0 else 0.0
    f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f1


def average_precision(
    dets: Sequence[Detection],
    gts_by_image: Dict[str, Sequence[Box]],
    iou_threshold: float,
) -> Tuple[float, List[Tuple[float, float]]]:
    """All-points-interpolated AP over a score sweep of pooled detections.

    Detections are processed in descending score order (stable under ties)
    and matched greedily within their own image; the raw cumulative
    (recall, precision) points are returned alongside the integrated area.
    """
    n_gt = sum(len(v) for v in gts_by_image.values())
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken: Dict[str, List[bool]] = {
        img: [False] * len(boxes) for img, boxes in gts_by_image.items()
    }
    points: List[Tuple[float, float]] = []
    tp = 0
    for rank, i in enumerate(order, start=1):
        det = dets[i]
        boxes = gts_by_image.get(det.image_id, ())
        flags = taken.get(det.image_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(boxes):
            if flags[j]:
                continue
            value = iou(det.box, gt)
            if value > best_iou:
                best_iou, best_j = value, j
        if best_j >= 0 and best_iou >= iou_threshold:
            flags[best_j] = True
            tp += 1
        recall = tp / n_gt if n_gt else 0.0
        points.append((recall, tp / rank))
    return _integrate_pr(points), points


def _integrate_pr(points: Sequence[Tuple[float, float]]) -> float:
    """Area under the monotone (non-increasing) precision envelope."""
    if not points:
        return 0.0
    recalls = [r for r, _ in points]
    precisions = [p for _, p in points]
    envelope = precisions[:]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    area = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, envelope):
        area += (r - prev_r) * p
        prev_r = r
    return area


def evaluate(model, samples: Sequence[Sample], cfg: EvalConfig = EvalConfig()):
    """Run the inference strategy over samples and score the detections."""
    import torch

    if not samples:
        raise ValidationError("no samples to evaluate")
    inf_cfg = InferenceConfig(
        refine_iters=cfg.refine or 0, binarize_threshold=cfg.binarize_threshold
    )
    all_dets: List[Detection] = []
    gts_by_image: Dict[str, List[Box]] = {}
    tp = fp = fn = 0
    for sample in samples:
        canvas, transform = preprocess(sample.image, model.config.image_size)
        image = torch.from_numpy(canvas)
        if cfg.refine is None:
            result = predict(model, image, inf_cfg)
        else:
            result = predict_refined(model, image, inf_cfg)
        dets = mask_to_detections(
            result.selected_mask, result.selected_score, transform,
            min_area=cfg.min_area, image_id=sample.source_id,
        )
        gts_by_image[sample.source_id] = list(sample.gt_boxes)
        m = match(dets, sample.gt_boxes, cfg.iou_threshold)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        all_dets.extend(dets)
    totals = MatchResult(tp=tp, fp=fp, fn=fn, det_flags=(), iou_threshold=cfg.iou_threshold)
    p, r, f1 = precision_recall_f1(totals)
    ap, pr_curve = average_precision(all_dets, gts_by_image, cfg.iou_threshold)
    return DetectionReport(
        precision=p, recall=r, f1=f1, ap=ap, pr_curve=pr_curve,
        iou_threshold=cfg.iou_threshold, n_images=len(samples), tp=tp, fp=fp, fn=fn,
    )


def mask_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Hard Dice coefficient 2|P&G| / (|P|+|G|); empty-vs-empty counts as 1."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def dataset_dice(model, samples: Sequence[Sample], refine: Optional[int] = None) -> float:
    """Mean Dice of the selected canvas mask against the canvas ground truth."""
    import torch

    if not samples:
        raise ValidationError("no samples")
    scores = []
    for sample in samples:
        canvas, transform = preprocess(sample.image, model.config.image_size)
        image = torch.from_numpy(canvas)
        if refine is None:
            result = predict(model, image)
        else:
            result = predict_refined(model, image, InferenceConfig(refine_iters=refine))
        gt = canvas_gt_mask(sample, transform)
        scores.append(mask_dice(result.selected_mask, gt))
    return float(np.mean(scores))


def write_pr_curve_csv(path, pr_curve: Sequence[Tuple[float, float]]) -> None:
    lines = ["recall,precision"]
    lines += [f"{r!r},{p!r}" for r, p in pr_curve]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
