"""
Prior-guided sampling.

The composite prior is encoded, noised to t_p and pasted into an otherwise
pure-noise latent. While the destination time of a step is still above t_p
the foreground is re-imposed after the step. During the first N_sc steps
each layout region is denoised by its own transformer pass, conditioned on
its own caption, and the result is blended with a global pass on the base
caption.
"""
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from compositor import CompositePrior, build_composite_prior, save_prior
from dataset import write_png
from dit_model import DiTModel, TextEmbedding, region_tokens
from errors import PipelineError, ShapeError
from latent_codec import encode_latent
from latent_grid import LatentGrid
from layout import RegionMasks, layout_to_dict, plan_rule, rasterize_masks
from models import GuidanceConfig, PlannerTranscript, SemanticLayout, StepSummary, config_hash
from prompt_dsl import parse_prompt_dsl
from sampler import derive_seed, gaussian, latent_shape, latent_to_image, model_output
from schedules import NoiseSchedule, forward_noise

logger = logging.getLogger(__name__)

NEUTRAL_FILL = 0.5

Planner = Callable[[str], Tuple[SemanticLayout, Optional[PlannerTranscript]]]


@dataclass(frozen=True)
class PriorLatent:
    z_prior: torch.Tensor      # (h, w, C)
    fg_mask: torch.Tensor      # (h, w) bool
    t_p: float


@dataclass(frozen=True)
class RegionPrompts:
    base: TextEmbedding
    background: TextEmbedding
    objects: Dict[int, TextEmbedding]

    @classmethod
    def from_layout(cls, model: DiTModel, layout: SemanticLayout) -> "RegionPrompts":
        return cls(
            base=model.embed_text(layout.base_caption),
            background=model.embed_text(layout.background_caption),
            objects={obj.id: model.embed_text(obj.caption) for obj in layout.objects},
        )


@dataclass
class LatentState:
    z: torch.Tensor
    t: float
    step_index: int = 0
    z_base: Optional[torch.Tensor] = None
    z_ob: Optional[torch.Tensor] = None
    skipped_regions: List[Optional[int]] = field(default_factory=list)


@dataclass
class RunRecord:
    prompt: str
    layout: SemanticLayout
    prior: CompositePrior
    final_image: np.ndarray
    config: GuidanceConfig
    seeds: Dict[str, object]
    steps: List[StepSummary]
    planner: str = "rule"
    transcript: Optional[PlannerTranscript] = None
    run_dir: Optional[Path] = None


# ================== Prior latent ==================

def init_prior_latent(prior: CompositePrior, t_p: float, schedule: NoiseSchedule, seed: int,
                      patch_size: int = 2, neutral: float = NEUTRAL_FILL) -> PriorLatent:
    if not 0.0 < t_p < schedule.T:
        raise ValueError(f"t_p={t_p} must lie in (0, {schedule.T})")
    image = np.asarray(prior.image, dtype=np.float32)
    union = np.asarray(prior.union_mask, dtype=bool)
    if image.ndim != 3 or union.shape != image.shape[:2]:
        raise ShapeError(f"composite {image.shape} and union mask {union.shape} disagree")

    filled = np.where(union[..., None], image, np.float32(neutral)).astype(np.float32)
    z_op = torch.from_numpy(encode_latent(filled, patch_size))
    fg = torch.from_numpy(LatentGrid(image.shape[0], patch_size).downsample_mask(union))

    generator = torch.Generator().manual_seed(seed)
    # background draw first: with the prior disabled the same seed gives the same start
    z_bg = gaussian(tuple(z_op.shape), seed, generator)
    z_1 = gaussian(tuple(z_op.shape), seed, generator)
    z_hat = forward_noise(z_op, t_p, z_1, schedule)
    return PriorLatent(z_prior=torch.where(fg[..., None], z_hat, z_bg), fg_mask=fg, t_p=t_p)


def reinforce_prior(z_next: torch.Tensor, prior: PriorLatent, t_next: float) -> torch.Tensor:
    if not t_next > prior.t_p:
        raise ValueError(f"reinforcement applies only while t_next > t_p ({t_next} <= {prior.t_p})")
    return torch.where(prior.fg_mask[..., None], prior.z_prior, z_next)


def pinned_times(schedule: NoiseSchedule, t_p: float) -> List[float]:
    """Grid times at which the foreground equals the prior."""
    return [t for t in schedule.timesteps() if t > t_p]


# ================== Region streams ==================

def region_list(masks: RegionMasks) -> List[Tuple[Optional[int], np.ndarray]]:
    """(region id, cell mask) for objects in id order, then the background under id None."""
    ordered = sorted(zip(masks.object_ids, masks.object_masks), key=lambda item: item[0])
    return ordered + [(None, masks.background_mask)]


def segment_latent(z: torch.Tensor, masks: RegionMasks) -> Dict[Optional[int], Tuple[torch.Tensor, torch.Tensor]]:
    return {rid: region_tokens(z, mask) for rid, mask in region_list(masks)}


def recompose_latent(regions: Dict[int, Tuple[torch.Tensor, torch.Tensor]], shape) -> torch.Tensor:
    channels = shape[-1]
    flat = torch.zeros(int(np.prod(shape[:-1])), channels, dtype=torch.float32)
    for tokens, positions in regions.values():
        if positions.numel():
            flat[positions] = tokens[0].to(flat.dtype)
    return flat.reshape(shape)


def _region_output(model: DiTModel, tokens: torch.Tensor, positions: torch.Tensor, t: float,
                   text: TextEmbedding, cfg_scale: float) -> torch.Tensor:
    times = torch.full((1,), float(t), dtype=tokens.dtype)
    with torch.no_grad():
        cond = model.forward_tokens(tokens, positions, times, text)
        if cfg_scale == 1.0:
            return cond
        base = model.forward_tokens(tokens, positions, times, model.empty_text())
    return base + cfg_scale * (cond - base)


def spatial_controlled_step(model: DiTModel, state: LatentState, masks: RegionMasks, prompts: RegionPrompts,
                            config: GuidanceConfig, schedule: NoiseSchedule, t_next: float) -> LatentState:
    z, t = state.z, state.t
    if tuple(masks.union_mask.shape) != tuple(z.shape[:2]):
        raise ShapeError(f"region masks {masks.union_mask.shape} do not match latent {tuple(z.shape[:2])}")

    out_base = model_output(model, z, t, prompts.base, config.cfg_scale)
    z_base = schedule.step(z, out_base, t, t_next)

    stepped, skipped = {}, []
    for rid, (tokens, positions) in segment_latent(z, masks).items():
        if positions.numel() == 0:
            logger.info("step %d: region %s has no latent cells, skipped", state.step_index, rid)
            skipped.append(rid)
            continue
        text = prompts.background if rid is None else prompts.objects[rid]
        out = _region_output(model, tokens, positions, t, text, config.cfg_scale)
        stepped[rid] = (schedule.step(tokens, out, t, t_next), positions)
    z_ob = recompose_latent(stepped, tuple(z.shape))

    merged = z_base * config.ratio_base + z_ob * (1.0 - config.ratio_base)
    return LatentState(z=merged, t=t_next, step_index=state.step_index + 1,
                       z_base=z_base, z_ob=z_ob, skipped_regions=skipped)


def plain_step(model: DiTModel, state: LatentState, prompts: RegionPrompts, config: GuidanceConfig,
               schedule: NoiseSchedule, t_next: float) -> LatentState:
    out = model_output(model, state.z, state.t, prompts.base, config.cfg_scale)
    return LatentState(z=schedule.step(state.z, out, state.t, t_next), t=t_next, step_index=state.step_index + 1)


# ================== Pipeline ==================

def rule_planner(canvas_size: int = 32, patch_size: int = 2) -> Planner:
    def _plan(prompt: str):
        return plan_rule(parse_prompt_dsl(prompt), canvas_size, patch_size), None
    return _plan


class _Stage:
    """Context manager that wraps failures with the name of the running stage."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError) and isinstance(exc, Exception):
            raise PipelineError(self.name, exc) from exc
        return False


def denoise(model: DiTModel, schedule: NoiseSchedule, config: GuidanceConfig, prior: CompositePrior,
            masks: RegionMasks, prompts: RegionPrompts, latent_seed: int) -> Tuple[torch.Tensor, List[StepSummary]]:
    if config.reinforce:
        prior_latent = init_prior_latent(prior, config.t_p, schedule, latent_seed, model.config.patch_size)
        z = prior_latent.z_prior.clone()
    else:
        prior_latent = None
        z = gaussian(latent_shape(model), latent_seed)

    n_sc = config.n_sc if config.spatial_control else 0
    state = LatentState(z=z, t=schedule.T)
    summaries = []
    times = schedule.timesteps()
    for index, t_next in enumerate(times[1:]):
        t = state.t
        if index < n_sc:
            state = spatial_controlled_step(model, state, masks, prompts, config, schedule, t_next)
            mode = "spatial"
        else:
            state = plain_step(model, state, prompts, config, schedule, t_next)
            mode = "plain"
        reinforced = prior_latent is not None and t_next > config.t_p
        if reinforced:
            state.z = reinforce_prior(state.z, prior_latent, t_next)
        summaries.append(StepSummary(index=index, t=t, t_next=t_next, mode=mode, reinforced=reinforced,
                                     skipped_regions=list(state.skipped_regions),
                                     latent_rms=float(state.z.pow(2).mean().sqrt())))
    return state.z, summaries


def generate(prompt: str, model: DiTModel, planner: Planner, config: GuidanceConfig,
             schedule: Optional[NoiseSchedule] = None, run_dir=None, planner_name: str = "rule",
             object_source=None) -> Tuple[np.ndarray, RunRecord]:
    """plan -> objects -> composite prior -> guided denoising -> image; optionally saved to run_dir."""
    if schedule is None:
        schedule = NoiseSchedule(kind=config.schedule_kind, num_steps=config.num_steps)
    elif schedule.num_steps != config.num_steps:
        schedule = NoiseSchedule(kind=schedule.kind, T=schedule.T, num_steps=config.num_steps)

    with _Stage("plan"):
        layout, transcript = planner(prompt)

    with _Stage("compose"):
        prior = build_composite_prior(layout, config.master_seed, object_source or config.object_source,
                                      model=model, schedule=schedule, cfg_scale=config.cfg_scale)

    with _Stage("denoise"):
        masks = rasterize_masks(layout, [prior.mask_for(obj.id) for obj in layout.objects], model.grid_size)
        prompts = RegionPrompts.from_layout(model, layout)
        latent_seed = derive_seed(config.master_seed, "latent")
        z, summaries = denoise(model, schedule, config, prior, masks, prompts, latent_seed)

    with _Stage("decode"):
        image = latent_to_image(z, model.config.patch_size)

    record = RunRecord(
        prompt=prompt, layout=layout, prior=prior, final_image=image, config=config,
        seeds={"master": config.master_seed, "latent": latent_seed,
               "objects": {str(k): v for k, v in sorted(prior.seeds.items())}},
        steps=summaries, planner=planner_name, transcript=transcript,
    )
    if run_dir is not None:
        with _Stage("save"):
            record.run_dir = save_run(record, run_dir)
    return image, record


# ================== Run directory ==================

def run_dir_name(prompt: str, master_seed: int) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", prompt.lower()).strip("-")[:48] or "run"
    return f"{slug}-s{master_seed}"


def save_run(record: RunRecord, directory) -> Path:
    """
    Files: layout.json, prior.png, union_mask.png, masks/mask_<id>.png,
    prior.json, final.png, config.json, seeds.json, steps.jsonl, record.json
    and transcript.json for LLM-planned runs.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_prior(record.prior, directory)
    write_png(directory / "final.png", record.final_image)

    config = record.config.model_dump(mode="json")
    (directory / "layout.json").write_text(json.dumps(layout_to_dict(record.layout), indent=2, sort_keys=True))
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    (directory / "seeds.json").write_text(json.dumps(record.seeds, indent=2, sort_keys=True))
    (directory / "steps.jsonl").write_text("".join(s.model_dump_json() + "\n" for s in record.steps))
    if record.transcript is not None:
        (directory / "transcript.json").write_text(record.transcript.model_dump_json(indent=2))
    (directory / "record.json").write_text(json.dumps({
        "prompt": record.prompt,
        "planner": record.planner,
        "config_hash": config_hash(record.config),
        "master_seed": record.config.master_seed,
    }, indent=2, sort_keys=True))
    logger.info("run saved to %s", directory)
    return directory
