"""Image preprocessing, ground-truth masks, dataset adapters, synthetic scenes."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ValidationError

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]

# Common large-scale-pretraining pixel statistics; the padding region of a
# canvas is exactly the normalized zero value under these.
DEFAULT_PIXEL_MEAN = (123.675, 116.28, 103.53)
DEFAULT_PIXEL_STD = (58.395, 57.12, 57.375)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class CanvasTransform:
    """Bookkeeping for the resize-long-side + pad-right/bottom canvas mapping."""

    scale: float
    resized_w: int
    resized_h: int
    pad_right: int
    pad_bottom: int
    canvas: int
    orig_w: int
    orig_h: int

    @classmethod
    def identity(cls, size: int) -> "CanvasTransform":
        return cls(1.0, size, size, 0, 0, size, size, size)


@dataclass
class Sample:
    """One annotated image; the mask is the union of the filled boxes."""

    image: np.ndarray            # uint8 [H, W, 3]
    gt_boxes: List[Box]
    source_id: str
    split: str = "train"
    gt_mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        h, w = self.image.shape[:2]
        for box in self.gt_boxes:
            x1, y1, x2, y2 = box
            if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
                raise ValidationError(f"{self.source_id}: box {box} outside {w}x{h} image")
        if self.gt_mask is None:
            self.gt_mask = boxes_to_mask(self.gt_boxes, h, w)


def preprocess(
    image: np.ndarray,
    canvas_size: int = 1024,
    mean: Sequence[float] = DEFAULT_PIXEL_MEAN,
    std: Sequence[float] = DEFAULT_PIXEL_STD,
) -> Tuple[np.ndarray, CanvasTransform]:
    """Resize the long side to the canvas, pad right/bottom, normalize.

    Returns a float32 [3, S, S] array plus the transform needed to map
    predictions back to original pixels.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValidationError("image has a zero dimension")
    scale = canvas_size / max(w, h)
    if w >= h:
        resized_w, resized_h = canvas_size, int(round(h * scale))
    else:
        resized_w, resized_h = int(round(w * scale)), canvas_size

    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()
    x = F.interpolate(
        x.unsqueeze(0), size=(resized_h, resized_w), mode="bilinear", align_corners=False
    ).squeeze(0)
    pad_right = canvas_size - resized_w
    pad_bottom = canvas_size - resized_h
    x = F.pad(x, (0, pad_right, 0, pad_bottom), value=0.0)

    mean_t = torch.tensor(mean).view(3, 1, 1)
    std_t = torch.tensor(std).view(3, 1, 1)
    x = (x - mean_t) / std_t
    transform = CanvasTransform(
        scale=scale, resized_w=resized_w, resized_h=resized_h,
        pad_right=pad_right, pad_bottom=pad_bottom, canvas=canvas_size,
        orig_w=w, orig_h=h,
    )
    return x.numpy(), transform


def boxes_to_mask(boxes: Sequence[Box], h: int, w: int) -> np.ndarray:
    """Rasterize boxes to a binary union mask ([x1, x2) x [y1, y2) convention)."""
    mask = np.zeros((h, w), dtype=bool)
    for box in boxes:
        x1, y1, x2, y2 = (int(round(v)) for v in box)
        x1, y1 = max(x1, 0), max(y1, 0)
        x2, y2 = min(x2, w), min(y2, h)
        if x2 <= x1 or y2 <= y1:
            warnings.warn(f"dropping degenerate box {box}", stacklevel=2)
            continue
        mask[y1:y2, x1:x2] = True
    return mask


def transform_boxes(boxes: Sequence[Box], t: CanvasTransform) -> List[Box]:
    """Map original-pixel boxes onto the canvas."""
    out = []
    for x1, y1, x2, y2 in boxes:
        out.append((
            min(x1 * t.scale, t.resized_w), min(y1 * t.scale, t.resized_h),
            min(x2 * t.scale, t.resized_w), min(y2 * t.scale, t.resized_h),
        ))
    return out


def untransform_boxes(boxes: Sequence[Box], t: CanvasTransform) -> List[Box]:
    """Map canvas-space boxes back to original pixels."""
    out = []
    for x1, y1, x2, y2 in boxes:
        out.append((
            min(x1 / t.scale, t.orig_w), min(y1 / t.scale, t.orig_h),
            min(x2 / t.scale, t.orig_w), min(y2 / t.scale, t.orig_h),
        ))
    return out


def untransform_mask(mask_canvas: np.ndarray, t: CanvasTransform) -> np.ndarray:
    """Crop padding and resize a canvas mask back to original resolution."""
    cropped = np.asarray(mask_canvas)[: t.resized_h, : t.resized_w]
    x = torch.from_numpy(np.ascontiguousarray(cropped)).float()
    x = F.interpolate(
        x.unsqueeze(0).unsqueeze(0), size=(t.orig_h, t.orig_w), mode="nearest"
    ).squeeze()
    return x.numpy() > 0.5


def canvas_gt_mask(sample: Sample, t: CanvasTransform) -> np.ndarray:
    """Ground-truth mask rasterized directly in canvas space."""
    return boxes_to_mask(transform_boxes(sample.gt_boxes, t), t.canvas, t.canvas)


# ---------------------------------------------------------------------------
# Dataset adapters
# ---------------------------------------------------------------------------

def load_dataset(
    root,
    format: str,
    default_split: str = "train",
    corner_masks: bool = False,
) -> List[Sample]:
    """Load an annotated dataset from disk.

    Formats: ``generic_json`` (documented JSON schema), ``ufpr`` (per-image
    text annotations under training/validation/testing), ``ccpd``
    (filename-encoded boxes). Malformed entries are skipped and counted, not
    fatal.
    """
    root = Path(root)
    if not root.exists():
        raise ValidationError(f"dataset root {root} does not exist")
    if format == "generic_json":
        return _load_generic_json(root)
    if format == "ufpr":
        return _load_ufpr(root, corner_masks=corner_masks)
    if format == "ccpd":
        return _load_ccpd(root, default_split=default_split)
    raise ValidationError(f"unknown dataset format {format!r}")


def _read_image(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def _load_generic_json(root: Path) -> List[Sample]:
    json_path = root if root.is_file() else root / "annotations.json"
    if not json_path.exists():
        raise ValidationError(f"missing {json_path}")
    base = json_path.parent
    spec = json.loads(json_path.read_text())
    samples, errors = [], 0
    for entry in spec.get("images", []):
        try:
            image = _read_image(base / entry["file"])
            boxes = [tuple(float(v) for v in b) for b in entry.get("boxes", [])]
            samples.append(Sample(
                image=image, gt_boxes=boxes,
                source_id=entry["file"], split=entry.get("split", "train"),
            ))
        except Exception as exc:  # noqa: BLE001 - per-file resilience
            errors += 1
            logger.warning("skipping %s: %s", entry.get("file", "<unknown>"), exc)
    if errors:
        logger.warning("generic_json loader skipped %d malformed entries", errors)
    return samples


_UFPR_SPLITS = {"training": "train", "validation": "val", "testing": "test"}


def _parse_ufpr_annotation(text: str) -> Tuple[List[Box], List[List[Tuple[float, float]]]]:
    boxes, corner_sets = [], []
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("position_plate:"):
            vals = [float(v) for v in line.split(":", 1)[1].split()]
            if len(vals) != 4:
                raise ValueError(f"bad position_plate line {line!r}")
            x, y, w, h = vals
            boxes.append((x, y, x + w, y + h))
        elif line.startswith("corners:"):
            pts = []
            for pair in line.split(":", 1)[1].split():
                xs, ys = pair.split(",")
                pts.append((float(xs), float(ys)))
            corner_sets.append(pts)
    return boxes, corner_sets


def _quad_mask(corner_sets, h: int, w: int) -> np.ndarray:
    from PIL import ImageDraw

    img = Image.new("1", (w, h), 0)
    draw = ImageDraw.Draw(img)
    for pts in corner_sets:
        draw.polygon([(x, y) for x, y in pts], fill=1)
    return np.asarray(img, dtype=bool)


def _load_ufpr(root: Path, corner_masks: bool = False) -> List[Sample]:
    samples, errors = [], 0
    for img_path in sorted(root.rglob("*")):
        if img_path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        ann_path = img_path.with_suffix(".txt")
        if not ann_path.exists():
            continue
        split = "train"
        for part in img_path.parts:
            if part.lower() in _UFPR_SPLITS:
                split = _UFPR_SPLITS[part.lower()]
        try:
            boxes, corner_sets = _parse_ufpr_annotation(ann_path.read_text())
            if not boxes:
                raise ValueError("no position_plate annotation")
            image = _read_image(img_path)
            mask = None
            if corner_masks and corner_sets:
                mask = _quad_mask(corner_sets, *image.shape[:2])
            samples.append(Sample(
                image=image, gt_boxes=boxes, source_id=str(img_path.relative_to(root)),
                split=split, gt_mask=mask,
            ))
        except Exception as exc:  # noqa: BLE001
            errors += 1
            logger.warning("skipping %s: %s", img_path, exc)
    if errors:
        logger.warning("ufpr loader skipped %d malformed entries", errors)
    return samples


def parse_ccpd_filename(name: str) -> Box:
    """Decode the bounding box from a CCPD-style filename stem.

    Fields are '-'-separated; the third field holds 'x1&y1_x2&y2'.
    """
    fields = name.split("-")
    if len(fields) < 3:
        raise ValueError(f"{name!r}: too few fields for CCPD encoding")
    tl, br = fields[2].split("_")
    x1, y1 = (float(v) for v in tl.split("&"))
    x2, y2 = (float(v) for v in br.split("&"))
    return (x1, y1, x2, y2)


def _load_ccpd(root: Path, default_split: str = "train") -> List[Sample]:
    samples, errors = [], 0
    for img_path in sorted(root.rglob("*")):
        if img_path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            box = parse_ccpd_filename(img_path.stem)
            image = _read_image(img_path)
            samples.append(Sample(
                image=image, gt_boxes=[box],
                source_id=str(img_path.relative_to(root)), split=default_split,
            ))
        except Exception as exc:  # noqa: BLE001
            errors += 1
            logger.warning("skipping %s: %s", img_path, exc)
    if errors:
        logger.warning("ccpd loader skipped %d malformed entries", errors)
    return samples


# ---------------------------------------------------------------------------
# Synthetic plate scenes
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for the synthetic road-scene generator."""

    width: int = 320
    height: int = 240
    min_plates: int = 1
    max_plates: int = 3
    rel_width: Tuple[float, float] = (0.28, 0.45)   # plate width / image width
    aspect: Tuple[float, float] = (2.6, 4.2)        # plate w / h
    split: str = "train"


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells=(5, 7), amp=18.0) -> np.ndarray:
    coarse = rng.normal(0.0, amp, cells)
    x = torch.from_numpy(coarse).float().unsqueeze(0).unsqueeze(0)
    x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    return x.squeeze().numpy()


def _place_plate(rng, w, h, cfg, existing, margin=4) -> Optional[Tuple[int, int, int, int]]:
    for _ in range(50):
        pw = int(rng.uniform(*cfg.rel_width) * w)
        ph = max(10, int(pw / rng.uniform(*cfg.aspect)))
        if pw >= w - 2 * margin or ph >= h - 2 * margin:
            continue
        x1 = int(rng.integers(margin, w - pw - margin))
        y1 = int(rng.integers(margin, h - ph - margin))
        box = (x1, y1, x1 + pw, y1 + ph)
        # keep plates 8-connectivity-separable: expand by 3 px and require disjoint
        clear = all(
            box[2] + 3 <= bx1 or bx2 + 3 <= box[0] or box[3] + 3 <= by1 or by2 + 3 <= box[1]
            for bx1, by1, bx2, by2 in existing
        )
        if clear:
            return box
    return None


def _draw_plate(rng: np.random.Generator, img: np.ndarray, box) -> None:
    x1, y1, x2, y2 = box
    border = np.array([rng.uniform(15, 45)] * 3) + rng.uniform(-5, 5, 3)
    fill = np.array([rng.uniform(215, 245)] * 3) + rng.uniform(-8, 8, 3)
    img[y1:y2, x1:x2] = border
    bw = 2
    ix1, iy1, ix2, iy2 = x1 + bw, y1 + bw, x2 - bw, y2 - bw
    img[iy1:iy2, ix1:ix2] = fill
    # glyph-like strokes across the inner area
    n_glyphs = int(rng.integers(4, 8))
    inner_w = ix2 - ix1
    glyph_w = max(2, inner_w // (2 * n_glyphs))
    gy1 = iy1 + max(1, (iy2 - iy1) // 5)
    gy2 = iy2 - max(1, (iy2 - iy1) // 5)
    for i in range(n_glyphs):
        gx = ix1 + int((i + 0.5) * inner_w / n_glyphs) - glyph_w // 2
        color = np.array([rng.uniform(20, 60)] * 3) + rng.uniform(-10, 10, 3)
        img[gy1:gy2, gx : gx + glyph_w] = color


def synthesize_dataset(n: int, seed: int, cfg: SynthConfig = SynthConfig()) -> List[Sample]:
    """Render ``n`` deterministic road-like scenes with plate-proxy rectangles."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    samples = []
    for i in range(n):
        base = rng.uniform(60, 130)
        img = np.empty((h, w, 3), dtype=np.float64)
        low = _smooth_noise(rng, h, w)
        grain = rng.normal(0, 6, (h, w))
        for c, tint in enumerate(rng.uniform(-10, 10, 3)):
            img[:, :, c] = base + tint + low + grain

        count = int(rng.integers(cfg.min_plates, cfg.max_plates + 1))
        boxes: List[Tuple[int, int, int, int]] = []
        for _ in range(count):
            box = _place_plate(rng, w, h, cfg, boxes)
            if box is not None:
                boxes.append(box)
                _draw_plate(rng, img, box)
        image = np.clip(img, 0, 255).astype(np.uint8)
        samples.append(Sample(
            image=image,
            gt_boxes=[tuple(float(v) for v in b) for b in boxes],
            source_id=f"synth-{seed}-{i:04d}",
            split=cfg.split,
        ))
    return samples
