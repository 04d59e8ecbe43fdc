"""
Synthetic compositional-shapes corpus.

Scenes are built by construction: entities get disjoint regions split along
the axis of their relation, replicas sit in a jittered grid inside their
region, and touching / overlapping pairs are placed relative to each other.
Every caption is DSL text that parses back to the scene's entities and
relations.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from tqdm import tqdm

from layout import TIGHT_RELATIONS, layout_from_dict, layout_to_dict
from models import (
    BACKGROUNDS, COLORS, DEFAULT_BACKGROUND, PALETTE, SHAPES, Entity, GrammarConfig, ObjectSpec,
    Relation, SceneAST, SemanticLayout, ShapeScene, ShapeSpec,
)
from prompt_dsl import parse_prompt_dsl, render_ast

logger = logging.getLogger(__name__)

SPLIT_RELATIONS = ("left of", "right of", "above", "below")
# Minimum background gap, in pixels, between shapes that must not touch
GAP = 2
# Visible fraction of the back shape for each overlap relation
VISIBLE_RANGE = {"hidden behind": (0.45, 0.7), "in front of": (0.7, 0.9), "behind": (0.7, 0.9)}
_SUBPIXEL_SHIFT = 4


@dataclass(frozen=True)
class CorpusSample:
    image: np.ndarray          # (N, N, 3) float32 in [0, 1]
    caption: str
    layout: SemanticLayout
    seed: int


# ================== Rasterization ==================

def shape_bounds(shape: ShapeSpec) -> Tuple[int, int, int]:
    """Integer top-left corner and side of a shape's bounding square."""
    side = int(round(shape.size))
    x0 = int(round(shape.center[0] - side / 2))
    y0 = int(round(shape.center[1] - side / 2))
    return x0, y0, side


def shape_mask(kind: str, x0: int, y0: int, side: int, canvas_size: int) -> np.ndarray:
    """Aliased pixel mask of a shape inscribed in the square [x0, x0+side) x [y0, y0+side)."""
    canvas = np.zeros((canvas_size, canvas_size), dtype=np.uint8)
    scale = 1 << _SUBPIXEL_SHIFT
    if kind == "square":
        cv2.rectangle(canvas, (x0, y0), (x0 + side - 1, y0 + side - 1), 1, thickness=-1, lineType=cv2.LINE_8)
    elif kind == "circle":
        # pixel centres sit at integer coordinates in OpenCV
        cx = x0 + side / 2 - 0.5
        cy = y0 + side / 2 - 0.5
        radius = side / 2 - 0.5
        cv2.circle(canvas, (int(round(cx * scale)), int(round(cy * scale))), int(round(radius * scale)), 1,
                   thickness=-1, lineType=cv2.LINE_8, shift=_SUBPIXEL_SHIFT)
    elif kind == "triangle":
        apex = (x0 + side / 2 - 0.5, y0)
        points = np.array([apex, (x0, y0 + side - 1), (x0 + side - 1, y0 + side - 1)], dtype=np.float64)
        cv2.fillPoly(canvas, [np.round(points * scale).astype(np.int32)], 1, lineType=cv2.LINE_8,
                     shift=_SUBPIXEL_SHIFT)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return canvas.astype(bool)


def spec_mask(shape: ShapeSpec, canvas_size: int) -> np.ndarray:
    x0, y0, side = shape_bounds(shape)
    return shape_mask(shape.kind, x0, y0, side, canvas_size)


def _paint_order(scene: ShapeScene) -> List[int]:
    # deepest first; ties keep list order
    return sorted(range(len(scene.shapes)), key=lambda i: -scene.shapes[i].depth)


def render_scene(scene: ShapeScene) -> np.ndarray:
    n = scene.canvas_size
    image = np.empty((n, n, 3), dtype=np.float32)
    image[:] = BACKGROUNDS[scene.background_color]
    for i in _paint_order(scene):
        shape = scene.shapes[i]
        image[spec_mask(shape, n)] = PALETTE[shape.color]
    return image


def render_visible_masks(scene: ShapeScene) -> List[np.ndarray]:
    """Per-shape masks of the pixels each shape owns after painting."""
    n = scene.canvas_size
    owner = np.full((n, n), -1, dtype=np.int32)
    for i in _paint_order(scene):
        owner[spec_mask(scene.shapes[i], n)] = i
    return [owner == i for i in range(len(scene.shapes))]


def render_object(caption: str, canvas_size: int = 32, fill: float = 0.75) -> np.ndarray:
    """Render a single-shape caption ("a red circle") centred on plain gray."""
    ast = parse_prompt_dsl(caption)
    entity = ast.entities[0]
    if entity.noun not in SHAPES:
        raise ValueError(f"{entity.noun!r} is not a drawable shape")
    color = entity.attributes[0] if entity.attributes else "white"
    side = int(round(canvas_size * fill))
    x0 = (canvas_size - side) // 2
    image = np.empty((canvas_size, canvas_size, 3), dtype=np.float32)
    image[:] = BACKGROUNDS[DEFAULT_BACKGROUND]
    image[shape_mask(entity.noun, x0, x0, side, canvas_size)] = PALETTE[color]
    return image


# ================== Scene sampling ==================

def _jittered_grid(rng: np.random.Generator, region, count: int, min_size: int, max_size: int):
    """Square bounds (x0, y0, side) for count replicas, or None if they cannot fit."""
    x0, y0, x1, y1 = region
    w, h = x1 - x0, y1 - y0
    best = None
    for cols in range(1, count + 1):
        rows = math.ceil(count / cols)
        cell = min(w // cols, h // rows)
        if best is None or cell > best[0]:
            best = (cell, cols, rows)
    cell, cols, rows = best
    largest = min(max_size, cell - GAP)
    if largest < min_size:
        return None

    cell_w, cell_h = w // cols, h // rows
    placed = []
    for k in range(count):
        row, col = divmod(k, cols)
        side = int(rng.integers(min_size, largest + 1))
        cx0 = x0 + col * cell_w
        cy0 = y0 + row * cell_h
        sx = int(rng.integers(cx0, cx0 + cell_w - side - GAP + 1))
        sy = int(rng.integers(cy0, cy0 + cell_h - side - GAP + 1))
        placed.append((sx, sy, side))
    return placed


def _split_region(rng: np.random.Generator, region, relation: str):
    x0, y0, x1, y1 = region
    if relation in ("left of", "right of"):
        cut = int(round(x0 + (x1 - x0) * rng.uniform(0.4, 0.6)))
        first, second = (x0, y0, cut, y1), (cut, y0, x1, y1)
    else:
        cut = int(round(y0 + (y1 - y0) * rng.uniform(0.4, 0.6)))
        first, second = (x0, y0, x1, cut), (x0, cut, x1, y1)
    if relation in ("left of", "above"):
        return first, second
    return second, first


def _overlap_pair(rng: np.random.Generator, relation: str, kinds, config: GrammarConfig, tries: int = 60):
    """Bounds for (subject, object) of an overlap or stacking relation, or None."""
    n = config.canvas_size
    for _ in range(tries):
        s_sub = int(rng.integers(config.min_size, config.max_size + 1))
        s_obj = int(rng.integers(config.min_size, config.max_size + 1))
        if relation == "on top of":
            ox = int(rng.integers(0, n - s_obj + 1))
            oy = int(rng.integers(s_sub, n - s_obj + 1))
            shift = int(rng.integers(-(s_obj // 4), s_obj // 4 + 1))
            sx = ox + (s_obj - s_sub) // 2 + shift
            sy = oy - s_sub
            if 0 <= sx <= n - s_sub and sy >= 0:
                return (sx, sy, s_sub), (ox, oy, s_obj)
            continue

        subject_front = relation == "in front of"
        front_kind, back_kind = (kinds[0], kinds[1]) if subject_front else (kinds[1], kinds[0])
        s_front, s_back = (s_sub, s_obj) if subject_front else (s_obj, s_sub)
        bx = int(rng.integers(0, n - s_back + 1))
        by = int(rng.integers(0, n - s_back + 1))
        fx = bx + int(rng.integers(-s_front + 2, s_back - 1))
        fy = by + int(rng.integers(-s_front + 2, s_back - 1))
        if not (0 <= fx <= n - s_front and 0 <= fy <= n - s_front):
            continue
        back = shape_mask(back_kind, bx, by, s_back, n)
        front = shape_mask(front_kind, fx, fy, s_front, n)
        visible = (back & ~front).sum() / back.sum()
        low, high = VISIBLE_RANGE[relation]
        if low <= visible <= high:
            front_bounds, back_bounds = (fx, fy, s_front), (bx, by, s_back)
            if subject_front:
                return front_bounds, back_bounds
            return back_bounds, front_bounds
    return None


def _entity_layers(relations: Sequence[Relation], count: int) -> List[int]:
    layers = [0] * count
    for rel in relations:
        if rel.relation == "in front of":
            layers[rel.object] = max(layers[rel.object], layers[rel.subject] + 1)
        elif rel.relation in ("behind", "hidden behind"):
            layers[rel.subject] = max(layers[rel.subject], layers[rel.object] + 1)
    return layers


def _build(rng: np.random.Generator, kinds, colors, counts, relations, config: GrammarConfig, single: bool):
    """Shape bounds per entity, or None when placement fails."""
    n = config.canvas_size
    bounds: List[List[Tuple[int, int, int]]] = []
    if single:
        side = int(rng.integers(config.max_size, int(0.75 * n) + 1))
        x0 = int(rng.integers(0, n - side + 1))
        y0 = int(rng.integers(0, n - side + 1))
        return [[(x0, y0, side)]]

    if relations and relations[0] in TIGHT_RELATIONS:
        pair = _overlap_pair(rng, relations[0], kinds, config)
        if pair is None:
            return None
        return [[pair[0]], [pair[1]]]

    region = (0, 0, n, n)
    for index in range(len(kinds)):
        if index < len(relations):
            own, region = _split_region(rng, region, relations[index])
        else:
            own = region
        placed = _jittered_grid(rng, own, counts[index], config.min_size, config.max_size)
        if placed is None:
            return None
        bounds.append(placed)
    return bounds


def sample_scene(rng_seed: int, grammar_config: GrammarConfig = GrammarConfig()) -> ShapeScene:
    config = grammar_config
    rng = np.random.default_rng(rng_seed)
    background = str(rng.choice(list(BACKGROUNDS)))
    mention = bool(rng.random() < config.mention_background_prob)

    single = bool(rng.random() < config.single_object_prob)
    split_relations = [r for r in config.relations if r in SPLIT_RELATIONS]
    if single:
        n_entities = 1
        relations: List[str] = []
    elif min(config.max_entities, config.max_count) >= 2 and config.relations and rng.random() < config.relation_prob:
        n_entities = int(rng.integers(2, min(config.max_entities, config.max_count) + 1))
        first = str(rng.choice(list(config.relations)))
        if first in TIGHT_RELATIONS or not split_relations:
            n_entities = 2
            relations = [first]
        else:
            relations = [first] + [str(rng.choice(split_relations)) for _ in range(n_entities - 2)]
    else:
        n_entities = 1
        relations = []

    kinds = [str(rng.choice(SHAPES)) for _ in range(n_entities)]
    colors = [str(c) for c in rng.choice(COLORS, size=n_entities, replace=False)]
    if n_entities == 1 and not single:
        counts = [int(rng.integers(1, config.max_count + 1))]
    elif relations and relations[0] in TIGHT_RELATIONS:
        counts = [1, 1]
    else:
        # total shapes never exceed max_count
        per_entity = min(3, config.max_count // n_entities)
        counts = [int(rng.integers(1, per_entity + 1)) for _ in range(n_entities)]

    bounds = None
    for attempt in range(config.max_retries):
        bounds = _build(rng, kinds, colors, counts, relations, config, single)
        if bounds is not None:
            break
        # relax: shrink the largest count, then drop the last entity
        if max(counts) > 1:
            counts[counts.index(max(counts))] -= 1
        elif len(kinds) > 1:
            kinds, colors, counts = kinds[:-1], colors[:-1], counts[:-1]
            relations = relations[:len(kinds) - 1]
    if bounds is None:
        kinds, colors, counts, relations = kinds[:1], colors[:1], [1], []
        bounds = _build(rng, kinds, colors, counts, relations, config, True)

    rel_models = tuple(Relation(subject=i, relation=r, object=i + 1) for i, r in enumerate(relations))
    layers = _entity_layers(rel_models, len(kinds))
    flat = [(entity, x0, y0, side) for entity, group in enumerate(bounds) for (x0, y0, side) in group]
    order = sorted(range(len(flat)), key=lambda k: (layers[flat[k][0]], k))
    depth_of = {k: rank + 1 for rank, k in enumerate(order)}

    shapes = tuple(
        ShapeSpec(kind=kinds[entity], color=colors[entity], center=(x0 + side / 2, y0 + side / 2),
                  size=float(side), depth=depth_of[k], entity=entity)
        for k, (entity, x0, y0, side) in enumerate(flat)
    )
    return ShapeScene(shapes=shapes, background_color=background, canvas_size=config.canvas_size,
                      relations=rel_models, mention_background=mention)


# ================== Captions and ground truth ==================

def scene_ast(scene: ShapeScene) -> SceneAST:
    groups: Dict[int, List[ShapeSpec]] = {}
    for shape in scene.shapes:
        groups.setdefault(shape.entity, []).append(shape)
    entities = tuple(
        Entity(noun=groups[i][0].kind, attributes=(groups[i][0].color,), count=len(groups[i]))
        for i in sorted(groups)
    )
    background = scene.background_color if scene.mention_background else None
    return SceneAST(entities=entities, relations=scene.relations, background=background)


def caption_scene(scene: ShapeScene) -> str:
    return render_ast(scene_ast(scene))


def object_caption(shape: ShapeSpec) -> str:
    return render_ast(SceneAST(entities=(Entity(noun=shape.kind, attributes=(shape.color,)),)))


def scene_layout(scene: ShapeScene) -> SemanticLayout:
    n = scene.canvas_size
    objects = []
    for index, shape in enumerate(scene.shapes):
        x0, y0, side = shape_bounds(shape)
        objects.append(ObjectSpec(id=index + 1, caption=object_caption(shape),
                                  box=(x0 / n, y0 / n, (x0 + side) / n, (y0 + side) / n), depth=shape.depth))
    return SemanticLayout(
        objects=tuple(objects),
        background_caption=f"a plain {scene.background_color} background",
        base_caption=caption_scene(scene),
        canvas_size=n,
    )


def make_sample(seed: int, grammar_config: GrammarConfig = GrammarConfig()) -> CorpusSample:
    scene = sample_scene(seed, grammar_config)
    return CorpusSample(image=render_scene(scene), caption=caption_scene(scene), layout=scene_layout(scene), seed=seed)


def generate_corpus(seeds: Iterable[int], grammar_config: GrammarConfig = GrammarConfig(),
                    show_progress: bool = False) -> List[CorpusSample]:
    seeds = list(seeds)
    return [make_sample(seed, grammar_config) for seed in tqdm(seeds, desc="scenes", disable=not show_progress)]


# ================== Corpus on disk ==================

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    """Write an RGB float image (or a boolean mask) as PNG."""
    data = np.asarray(image)
    if data.dtype == bool:
        data = data.astype(np.uint8) * 255
    else:
        data = to_uint8(data)
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"could not write {path}")


def read_png(path, mask: bool = False) -> np.ndarray:
    flag = cv2.IMREAD_GRAYSCALE if mask else cv2.IMREAD_COLOR
    data = cv2.imread(str(path), flag)
    if data is None:
        raise FileNotFoundError(path)
    if mask:
        return data > 127
    return cv2.cvtColor(data, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_corpus(root, split: str, samples: Sequence[CorpusSample], show_progress: bool = False) -> Path:
    directory = Path(root) / split
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for index, sample in enumerate(tqdm(samples, desc=f"write {split}", disable=not show_progress)):
        name = f"{index:06d}.png"
        write_png(directory / name, sample.image)
        lines.append(json.dumps({"file": name, "caption": sample.caption, "seed": sample.seed,
                                 "layout": layout_to_dict(sample.layout)}, sort_keys=True))
    (directory / "metadata.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    logger.info("wrote %d samples to %s", len(samples), directory)
    return directory


def load_corpus(root, split: str = "train", limit: Optional[int] = None) -> List[CorpusSample]:
    directory = Path(root) / split
    metadata = directory / "metadata.jsonl"
    if not metadata.is_file():
        raise FileNotFoundError(metadata)
    samples = []
    for line in metadata.read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        samples.append(CorpusSample(image=read_png(directory / record["file"]), caption=record["caption"],
                                    layout=layout_from_dict(record["layout"]), seed=record["seed"]))
        if limit is not None and len(samples) >= limit:
            break
    return samples
