"""
Deterministic shape detector for palette images.

Pixels are snapped to the nearest palette or background colour, each colour
is split into 8-connected components, and every component is classified by
fitting the renderer's own circle / square / triangle masks to it. Pixels of
a template that are covered by another object's colour do not count against
the fit, so partly hidden shapes keep their kind.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from skimage.measure import label, regionprops

from dataset import render_scene, render_visible_masks, shape_mask
from models import BACKGROUNDS, COLORS, PALETTE, SHAPES, ShapeScene

logger = logging.getLogger(__name__)

MIN_AREA = 6
VALID_FIT = 0.6
MATCH_IOU = 0.5

_REFERENCE = np.array([PALETTE[c] for c in COLORS] + list(BACKGROUNDS.values()), dtype=np.float32)


@dataclass(frozen=True)
class Detection:
    kind: str
    color: str
    center: Tuple[float, float]        # (x, y) pixels, centre of the fitted shape
    pixel_area: int
    mask: np.ndarray                   # visible pixels
    bbox: Tuple[int, int, int, int]    # x0, y0, x1, y1 of the visible pixels, end-exclusive
    fit_score: float
    template: np.ndarray               # full fitted shape, including hidden pixels


@dataclass(frozen=True)
class DetectorQualification:
    precision: float
    recall: float
    matched: int
    detected: int
    expected: int


def quantize(image: np.ndarray) -> np.ndarray:
    """Index into palette + backgrounds of the nearest reference colour, per pixel."""
    image = np.asarray(image, dtype=np.float32)
    distance = ((image[:, :, None, :] - _REFERENCE[None, None]) ** 2).sum(axis=-1)
    return np.argmin(distance, axis=-1)


@lru_cache(maxsize=65536)
def _template(kind: str, x0: int, y0: int, side: int, canvas_size: int) -> np.ndarray:
    mask = shape_mask(kind, x0, y0, side, canvas_size)
    mask.setflags(write=False)
    return mask


def _anchorings(bbox, side: int, canvas_size: int):
    """Top-left corners of every in-canvas square of this side that contains bbox."""
    x0, y0, x1, y1 = bbox
    for ay in range(max(0, y1 - side), min(y0, canvas_size - side) + 1):
        for ax in range(max(0, x1 - side), min(x0, canvas_size - side) + 1):
            yield ax, ay


def fit_shape(mask: np.ndarray, bbox, occluders: np.ndarray) -> Tuple[str, float, np.ndarray, Tuple[int, int, int]]:
    """
    Best (kind, score, template, (x0, y0, side)) for one component.

    score = |mask & T| / |mask | (T & ~occluders)|
    """
    n = mask.shape[0]
    x0, y0, x1, y1 = bbox
    longest = max(x1 - x0, y1 - y0)
    area = int(mask.sum())
    best = (SHAPES[0], -1.0, None, (x0, y0, longest))
    for side in range(longest, min(n, 2 * longest) + 1):
        for ax, ay in _anchorings(bbox, side, n):
            for kind in SHAPES:
                template = _template(kind, ax, ay, side, n)
                hit = int((template & mask).sum())
                if hit == 0:
                    continue
                union = area + int((template & ~occluders & ~mask).sum())
                score = hit / union
                if score > best[1]:
                    best = (kind, score, template, (ax, ay, side))
                    if score >= 1.0:
                        return best
    return best


def detect_shapes(image: np.ndarray, min_area: int = MIN_AREA) -> List[Detection]:
    labels = quantize(image)
    n = labels.shape[0]
    foreground = labels < len(COLORS)
    detections = []
    for index, color in enumerate(COLORS):
        colour_mask = labels == index
        if not colour_mask.any():
            continue
        occluders = foreground & ~colour_mask
        for region in regionprops(label(colour_mask, connectivity=2)):
            if region.area < min_area:
                continue
            mask = np.zeros((n, n), dtype=bool)
            mask[region.coords[:, 0], region.coords[:, 1]] = True
            y0, x0, y1, x1 = region.bbox
            kind, score, template, (tx, ty, side) = fit_shape(mask, (x0, y0, x1, y1), occluders)
            detections.append(Detection(
                kind=kind, color=color,
                center=(tx + side / 2.0, ty + side / 2.0),
                pixel_area=int(region.area), mask=mask, bbox=(x0, y0, x1, y1),
                fit_score=float(score), template=template if template is not None else mask,
            ))
    # deterministic order: colour, then top-left
    detections.sort(key=lambda d: (COLORS.index(d.color), d.bbox[1], d.bbox[0]))
    return detections


def is_valid_scene(detections: Sequence[Detection], min_fit: float = VALID_FIT) -> bool:
    """At least one shape, and every detection fits its shape template reasonably."""
    return bool(detections) and all(d.fit_score >= min_fit for d in detections)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int((a | b).sum())
    return int((a & b).sum()) / union if union else 0.0


def qualify_detector(scenes: Iterable[ShapeScene], min_area: int = MIN_AREA,
                     match_iou: float = MATCH_IOU) -> DetectorQualification:
    """
    Precision and recall against renderer ground truth. A detection matches
    a visible shape of the same kind and colour whose visible mask it
    overlaps with IoU >= match_iou; each ground-truth shape matches once.
    """
    matched = detected = expected = 0
    for scene in scenes:
        image = render_scene(scene)
        truth = [(shape, visible) for shape, visible in zip(scene.shapes, render_visible_masks(scene))
                 if visible.sum() >= min_area]
        found = detect_shapes(image, min_area)
        expected += len(truth)
        detected += len(found)
        used = set()
        for det in found:
            for k, (shape, visible) in enumerate(truth):
                if k in used or shape.kind != det.kind or shape.color != det.color:
                    continue
                if _iou(det.mask, visible) >= match_iou:
                    used.add(k)
                    matched += 1
                    break
    precision = matched / detected if detected else 1.0
    recall = matched / expected if expected else 1.0
    logger.info("detector: precision %.4f recall %.4f over %d shapes", precision, recall, expected)
    return DetectorQualification(precision=precision, recall=recall, matched=matched,
                                 detected=detected, expected=expected)


def largest(detections: Sequence[Detection], kind: str, color: Optional[str] = None) -> Optional[Detection]:
    candidates = [d for d in detections if d.kind == kind and (color is None or d.color == color)]
    if not candidates:
        return None
    return max(candidates, key=lambda d: (d.pixel_area, -d.bbox[1], -d.bbox[0]))
