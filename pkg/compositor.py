"""
Composite object prior: synthesize each layout object on plain gray, cut it
out, fit it into its box and paint everything back to front.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from dataset import render_object, write_png
from dit_model import DiTModel, in_vocabulary
from errors import DegenerateBoxError, GrammarError, NoForegroundError, VocabularyError
from latent_grid import LatentGrid
from layout import layout_to_dict
from models import BACKGROUNDS, DEFAULT_BACKGROUND, SHAPES, SemanticLayout
from prompt_dsl import parse_prompt_dsl
from sampler import derive_seed, sample_image
from schedules import NoiseSchedule

logger = logging.getLogger(__name__)

OBJECT_SUFFIX = " on a plain gray background"
SEGMENT_THRESHOLD = 0.15
SENTINEL = 0.5

ObjectSource = Callable[[str, int], np.ndarray]


@dataclass(frozen=True)
class ObjectCutout:
    image: np.ndarray          # (h, w, 3) crop
    mask: np.ndarray           # (h, w) bool, nonzero
    source_caption: str = ""


@dataclass(frozen=True)
class PlacedObject:
    object_id: int
    depth: int
    image: np.ndarray          # (N, N, 3)
    mask: np.ndarray           # (N, N) bool
    scale: float


@dataclass(frozen=True)
class CompositePrior:
    image: np.ndarray                    # o_p
    union_mask: np.ndarray               # m_p
    object_ids: Tuple[int, ...]          # ascending
    placed_masks: Tuple[np.ndarray, ...]  # visible pixels per object, same order as object_ids
    layout: Optional[SemanticLayout] = None
    scales: Dict[int, float] = field(default_factory=dict)
    seeds: Dict[int, int] = field(default_factory=dict)

    def mask_for(self, object_id: int) -> np.ndarray:
        return self.placed_masks[self.object_ids.index(object_id)]


def check_object_caption(caption: str) -> None:
    try:
        ast = parse_prompt_dsl(caption)
    except GrammarError as exc:
        raise VocabularyError(f"cannot synthesize {caption!r}: {exc}") from exc
    if len(ast.entities) != 1 or ast.entities[0].count != 1 or ast.entities[0].noun not in SHAPES:
        raise VocabularyError(f"cannot synthesize {caption!r}: expected a single drawable shape")
    if not in_vocabulary(caption):
        raise VocabularyError(f"cannot synthesize {caption!r}: words outside the model vocabulary")


def synthesize_object(caption: str, model: DiTModel, seed: int, schedule: NoiseSchedule,
                      cfg_scale: float = 1.0) -> np.ndarray:
    check_object_caption(caption)
    prompt = caption if "background" in caption else caption + OBJECT_SUFFIX
    return sample_image(model, schedule, prompt, seed, cfg_scale)


def segment_object(image: np.ndarray, background=BACKGROUNDS[DEFAULT_BACKGROUND],
                   threshold: float = SEGMENT_THRESHOLD, source_caption: str = "") -> ObjectCutout:
    image = np.asarray(image, dtype=np.float32)
    distance = np.linalg.norm(image - np.asarray(background, dtype=np.float32), axis=-1) / np.sqrt(3.0)
    foreground = (distance > threshold).astype(np.uint8)

    count, labels, stats, _ = cv2.connectedComponentsWithStats(foreground, connectivity=8)
    if count <= 1:
        raise NoForegroundError("no pixels differ from the background")
    # label 0 is the background; ties go to the lower label
    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    mask = labels == largest

    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    return ObjectCutout(image=image[y0:y1, x0:x1].copy(), mask=mask[y0:y1, x0:x1].copy(),
                        source_caption=source_caption)


def resize_object(cutout: ObjectCutout, box, canvas_size: int, object_id: int = 0,
                  depth: int = 1) -> PlacedObject:
    px0, py0, px1, py1 = LatentGrid(canvas_size, 1).box_pixel_bounds(box)
    box_w, box_h = px1 - px0, py1 - py0
    h, w = cutout.mask.shape
    if box_w <= 0 or box_h <= 0:
        raise DegenerateBoxError(f"box {tuple(box)} covers no pixels on a {canvas_size} canvas")

    scale = min(box_w / w, box_h / h)
    new_w = int(np.floor(w * scale + 1e-9))
    new_h = int(np.floor(h * scale + 1e-9))
    if new_w < 1 or new_h < 1:
        raise DegenerateBoxError(f"cutout {w}x{h} shrinks below one pixel in box {tuple(box)}")

    mask = cv2.resize(cutout.mask.astype(np.uint8), (new_w, new_h), interpolation=cv2.INTER_NEAREST).astype(bool)
    image = cv2.resize(cutout.image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    if not mask.any():
        raise DegenerateBoxError(f"cutout mask vanishes at scale {scale:.3f}")

    ox = px0 + (box_w - new_w) // 2
    oy = py0 + (box_h - new_h) // 2
    placed_image = np.zeros((canvas_size, canvas_size, 3), dtype=np.float32)
    placed_mask = np.zeros((canvas_size, canvas_size), dtype=bool)
    placed_image[oy:oy + new_h, ox:ox + new_w] = image.reshape(new_h, new_w, 3)
    placed_mask[oy:oy + new_h, ox:ox + new_w] = mask
    return PlacedObject(object_id=object_id, depth=depth, image=placed_image, mask=placed_mask, scale=float(scale))


def compose(placed: Sequence[PlacedObject], canvas_size: int, sentinel: float = SENTINEL) -> CompositePrior:
    """Paint deepest first; at equal depth the lower id ends up in front."""
    image = np.full((canvas_size, canvas_size, 3), sentinel, dtype=np.float32)
    owner = np.full((canvas_size, canvas_size), -1, dtype=np.int64)
    for obj in sorted(placed, key=lambda p: (p.depth, p.object_id), reverse=True):
        image[obj.mask] = obj.image[obj.mask]
        owner[obj.mask] = obj.object_id

    ids = tuple(sorted(p.object_id for p in placed))
    return CompositePrior(
        image=image,
        union_mask=owner != -1,
        object_ids=ids,
        placed_masks=tuple(owner == oid for oid in ids),
        scales={p.object_id: p.scale for p in placed},
    )


def build_composite_prior(layout: SemanticLayout, master_seed: int,
                          object_source: Union[str, ObjectSource] = "model",
                          model: Optional[DiTModel] = None, schedule: Optional[NoiseSchedule] = None,
                          cfg_scale: float = 1.0, sentinel: float = SENTINEL) -> CompositePrior:
    """
    object_source: "model" samples each object with the diffusion model,
    "render" draws it with the corpus renderer, or a callable
    (caption, seed) -> image.
    """
    if object_source == "model":
        if model is None or schedule is None:
            raise ValueError("object_source='model' needs a model and a schedule")

        def source(caption, seed):
            return synthesize_object(caption, model, seed, schedule, cfg_scale)
    elif object_source == "render":
        def source(caption, seed):
            check_object_caption(caption)
            return render_object(caption, layout.canvas_size)
    else:
        source = object_source

    placed, seeds = [], {}
    for obj in layout.objects:
        seed = derive_seed(master_seed, "object", obj.id)
        seeds[obj.id] = seed
        cutout = segment_object(source(obj.caption, seed), source_caption=obj.caption)
        placed.append(resize_object(cutout, obj.box, layout.canvas_size, obj.id, obj.depth))
        logger.debug("object %d %r placed at scale %.3f", obj.id, obj.caption, placed[-1].scale)

    prior = compose(placed, layout.canvas_size, sentinel)
    return CompositePrior(image=prior.image, union_mask=prior.union_mask, object_ids=prior.object_ids,
                          placed_masks=prior.placed_masks, layout=layout, scales=prior.scales, seeds=seeds)


def save_prior(prior: CompositePrior, directory) -> Path:
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    write_png(directory / "prior.png", prior.image)
    write_png(directory / "union_mask.png", prior.union_mask)
    for oid, mask in zip(prior.object_ids, prior.placed_masks):
        write_png(directory / "masks" / f"mask_{oid}.png", mask)
    sidecar = {
        "layout": layout_to_dict(prior.layout) if prior.layout is not None else None,
        "scales": {str(k): v for k, v in sorted(prior.scales.items())},
        "seeds": {str(k): v for k, v in sorted(prior.seeds.items())},
        "object_ids": list(prior.object_ids),
    }
    (directory / "prior.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return directory
