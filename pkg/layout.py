"""
2.5D semantic layouts: the rule planner, validation, region masks and the
layout JSON document shared with the LLM planner.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from errors import CapacityError
from latent_grid import LatentGrid
from models import (
    DEFAULT_BACKGROUND, OCCLUSION_RELATIONS, Entity, ObjectSpec, SceneAST, SemanticLayout, Violation,
)
from prompt_dsl import render_ast, render_entity

logger = logging.getLogger(__name__)

Rect = Tuple[float, float, float, float]   # x0, y0, x1, y1

TIGHT_RELATIONS = OCCLUSION_RELATIONS | {"on top of"}

# Replica boxes keep this fraction of their grid cell on every side
CELL_MARGIN = 0.1
OCCLUDER_SIDE = 0.6
# Horizontal offset between overlapping squares, in units of the square side
OCCLUSION_OFFSETS = {"hidden behind": 0.2, "in front of": 0.4, "behind": 0.4}


@dataclass(frozen=True)
class RegionMasks:
    object_ids: Tuple[int, ...]
    object_masks: Tuple[np.ndarray, ...]
    background_mask: np.ndarray
    union_mask: np.ndarray

    @property
    def resolution(self) -> int:
        return self.union_mask.shape[0]

    @property
    def empty_ids(self) -> List[int]:
        return [oid for oid, mask in zip(self.object_ids, self.object_masks) if not mask.any()]


# ================== Rule planner ==================

def _split(region: Rect, relation: str) -> Tuple[Rect, Rect]:
    """(subject side, object side) halves of a region for a 2D relation."""
    x0, y0, x1, y1 = region
    xm, ym = (x0 + x1) / 2, (y0 + y1) / 2
    left, right = (x0, y0, xm, y1), (xm, y0, x1, y1)
    top, bottom = (x0, y0, x1, ym), (x0, ym, x1, y1)
    if relation == "left of":
        return left, right
    if relation == "right of":
        return right, left
    if relation == "above":
        return top, bottom
    if relation == "below":
        return bottom, top
    raise ValueError(f"relation {relation!r} does not split a region")


def _cluster_squares(relations: Sequence[str], region: Rect) -> List[Rect]:
    """Overlapping / stacked squares for a run of tight relations, fitted into region."""
    # positions in units of the square side
    offsets = [(0.0, 0.0)]
    for relation in relations:
        px, py = offsets[-1]
        if relation == "on top of":
            offsets.append((px, py + 1.0))
        else:
            offsets.append((px + OCCLUSION_OFFSETS[relation], py))

    xs = [o[0] for o in offsets]
    ys = [o[1] for o in offsets]
    width_units = max(xs) + 1.0 - min(xs)
    height_units = max(ys) + 1.0 - min(ys)

    x0, y0, x1, y1 = region
    w, h = x1 - x0, y1 - y0
    side = min(OCCLUDER_SIDE * min(w, h), 0.9 * w / width_units, 0.9 * h / height_units)

    left = x0 + (w - side * width_units) / 2 - min(xs) * side
    top = y0 + (h - side * height_units) / 2 - min(ys) * side
    return [(left + ox * side, top + oy * side, left + (ox + 1) * side, top + (oy + 1) * side)
            for ox, oy in offsets]


def _grid_boxes(region: Rect, count: int, min_side: float) -> List[Rect]:
    x0, y0, x1, y1 = region
    w, h = x1 - x0, y1 - y0

    best = None
    for cols in range(1, count + 1):
        rows = math.ceil(count / cols)
        cell = min(w / cols, h / rows)
        # ties go to more columns
        if best is None or cell >= best[0]:
            best = (cell, cols, rows)
    cell, cols, rows = best

    side = cell * (1 - 2 * CELL_MARGIN)
    if side < min_side:
        raise CapacityError(
            f"{count} objects in a {w:.2f}x{h:.2f} region need boxes of side {side:.3f}, minimum is {min_side:.3f}"
        )

    cell_w, cell_h = w / cols, h / rows
    boxes = []
    for k in range(count):
        row, col = divmod(k, cols)
        cx = x0 + (col + 0.5) * cell_w
        cy = y0 + (row + 0.5) * cell_h
        boxes.append((cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2))
    return boxes


def _entity_regions(ast: SceneAST) -> List[Rect]:
    relations = [r.relation for r in ast.relations]
    n = len(ast.entities)
    regions: List[Rect] = [None] * n

    region: Rect = (0.0, 0.0, 1.0, 1.0)
    i = 0
    while i < n:
        j = i
        while j < n - 1 and relations[j] in TIGHT_RELATIONS:
            j += 1
        if j < n - 1:
            own, rest = _split(region, relations[j])
        else:
            own, rest = region, None

        if j == i:
            regions[i] = own
        else:
            for k, square in enumerate(_cluster_squares(relations[i:j], own)):
                regions[i + k] = square
        region = rest
        i = j + 1
    return regions


def _entity_layers(ast: SceneAST) -> List[int]:
    """Depth layer per entity: front entities get smaller layers."""
    layers = [0] * len(ast.entities)
    edges = []
    for rel in ast.relations:
        if rel.relation == "in front of":
            edges.append((rel.subject, rel.object))
        elif rel.relation in ("behind", "hidden behind"):
            edges.append((rel.object, rel.subject))
    for _ in range(len(ast.entities)):
        for front, back in edges:
            layers[back] = max(layers[back], layers[front] + 1)
    return layers


def plan_rule(ast: SceneAST, canvas_size: int, patch_size: int = 2) -> SemanticLayout:
    grid = LatentGrid(canvas_size, patch_size)
    regions = _entity_regions(ast)
    layers = _entity_layers(ast)

    placed = []   # (entity index, replica index, box)
    for index, (entity, region) in enumerate(zip(ast.entities, regions)):
        for replica, box in enumerate(_grid_boxes(region, entity.count, grid.min_box_side)):
            placed.append((index, replica, box))

    order = sorted(range(len(placed)), key=lambda k: (layers[placed[k][0]], placed[k][0], placed[k][1]))
    depths = {k: rank + 1 for rank, k in enumerate(order)}

    objects = []
    for k, (index, _, box) in enumerate(placed):
        entity = ast.entities[index]
        caption = render_entity(Entity(noun=entity.noun, attributes=entity.attributes, count=1))
        objects.append(ObjectSpec(id=k + 1, caption=caption, box=box, depth=depths[k]))

    background = ast.background or DEFAULT_BACKGROUND
    layout = SemanticLayout(
        objects=tuple(objects),
        background_caption=f"a plain {background} background",
        base_caption=render_ast(ast),
        canvas_size=canvas_size,
    )
    logger.debug("planned %d objects for %r", len(objects), layout.base_caption)
    return layout


# ================== Validation ==================

def validate_layout(layout: SemanticLayout, patch_size: int = 2) -> List[Violation]:
    violations = []
    if len(layout.objects) < 1:
        violations.append(Violation(field="objects", rule="K >= 1"))
    if layout.canvas_size <= 0 or layout.canvas_size % patch_size != 0:
        violations.append(Violation(field="canvas_size", rule="positive multiple of patch size"))
    if not layout.base_caption.strip():
        violations.append(Violation(field="base_caption", rule="non-empty"))

    seen = set()
    for index, obj in enumerate(layout.objects):
        field = f"objects[{index}]"
        x0, y0, x1, y1 = obj.box
        if not 0 <= x0:
            violations.append(Violation(field=f"{field}.box", rule="0 <= x0"))
        if not x0 < x1:
            violations.append(Violation(field=f"{field}.box", rule="x0 < x1"))
        if not x1 <= 1:
            violations.append(Violation(field=f"{field}.box", rule="x1 <= 1"))
        if not 0 <= y0:
            violations.append(Violation(field=f"{field}.box", rule="0 <= y0"))
        if not y0 < y1:
            violations.append(Violation(field=f"{field}.box", rule="y0 < y1"))
        if not y1 <= 1:
            violations.append(Violation(field=f"{field}.box", rule="y1 <= 1"))
        if obj.depth < 1:
            violations.append(Violation(field=f"{field}.depth", rule="depth >= 1"))
        if obj.id in seen:
            violations.append(Violation(field=f"{field}.id", rule="ids unique"))
        seen.add(obj.id)
    return violations


# ================== Region masks ==================

def box_masks(layout: SemanticLayout) -> List[np.ndarray]:
    """Pixel masks of the layout boxes themselves, one per object."""
    grid = LatentGrid(layout.canvas_size, 1)
    return [grid.rasterize_box(obj.box) for obj in layout.objects]


def rasterize_masks(layout: SemanticLayout, placed_object_masks: Sequence[np.ndarray],
                    resolution: int) -> RegionMasks:
    if resolution <= 0 or layout.canvas_size % resolution != 0:
        raise ValueError(f"resolution {resolution} does not divide canvas {layout.canvas_size}")
    if len(placed_object_masks) != len(layout.objects):
        raise ValueError(f"expected {len(layout.objects)} masks, got {len(placed_object_masks)}")

    grid = LatentGrid(layout.canvas_size, layout.canvas_size // resolution)
    cells = [grid.downsample_mask(mask) for mask in placed_object_masks]

    claimed = np.zeros((resolution, resolution), dtype=bool)
    owned: Dict[int, np.ndarray] = {}
    for k in sorted(range(len(layout.objects)), key=lambda k: (layout.objects[k].depth, layout.objects[k].id)):
        mine = cells[k] & ~claimed
        claimed |= mine
        owned[k] = mine

    object_masks = tuple(owned[k] for k in range(len(layout.objects)))
    regions = RegionMasks(
        object_ids=tuple(obj.id for obj in layout.objects),
        object_masks=object_masks,
        background_mask=~claimed,
        union_mask=claimed.copy(),
    )
    if regions.empty_ids:
        logger.info("objects %s have no latent cells at resolution %d", regions.empty_ids, resolution)
    return regions


# ================== JSON document ==================

def layout_to_dict(layout: SemanticLayout) -> dict:
    return {
        "objects": [
            {"id": obj.id, "caption": obj.caption, "box": list(obj.box), "depth": obj.depth}
            for obj in layout.objects
        ],
        "background": layout.background_caption,
        "base": layout.base_caption,
        "canvas": layout.canvas_size,
    }


def layout_from_dict(document: dict, canvas_size: int = None) -> SemanticLayout:
    objects = []
    for index, item in enumerate(document["objects"]):
        depth = item["depth"]
        if isinstance(depth, bool) or not isinstance(depth, (int, float)) or not float(depth).is_integer():
            raise ValueError(f"objects[{index}].depth must be an integer, got {depth!r}")
        objects.append(ObjectSpec(
            id=int(item.get("id", index + 1)),
            caption=str(item["caption"]),
            box=tuple(float(v) for v in item["box"]),
            depth=int(depth),
        ))
    return SemanticLayout(
        objects=tuple(objects),
        background_caption=str(document["background"]),
        base_caption=str(document["base"]),
        canvas_size=int(document.get("canvas", canvas_size)),
    )


def save_layout(layout: SemanticLayout, path) -> None:
    Path(path).write_text(json.dumps(layout_to_dict(layout), indent=2, sort_keys=True))


def load_layout(path) -> SemanticLayout:
    return layout_from_dict(json.loads(Path(path).read_text()))
