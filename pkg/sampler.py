"""Plain (unguided-by-layout) reverse process and seed bookkeeping."""
import hashlib
from typing import Callable, Optional, Tuple

import numpy as np
import torch

from dit_model import DiTModel, TextEmbedding, predict
from latent_codec import decode_latent
from schedules import NoiseSchedule


def derive_seed(master_seed: int, stage: str, index: int = 0) -> int:
    """Stable per-stage seed: sha256(master, stage, index) folded to 63 bits."""
    digest = hashlib.sha256(f"{master_seed}:{stage}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def gaussian(shape: Tuple[int, ...], seed: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if generator is None:
        generator = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=generator, dtype=torch.float32)


def latent_shape(model: DiTModel) -> Tuple[int, int, int]:
    return model.grid_size, model.grid_size, model.channels


def model_output(model: DiTModel, z: torch.Tensor, t: float, text: TextEmbedding,
                 cfg_scale: float = 1.0, uncond: Optional[TextEmbedding] = None) -> torch.Tensor:
    """Conditional prediction, optionally mixed with the empty-caption branch."""
    cond = predict(model, z, t, text)
    if cfg_scale == 1.0:
        return cond
    if uncond is None:
        uncond = model.empty_text()
    base = predict(model, z, t, uncond)
    return base + cfg_scale * (cond - base)


def sample_plain(model: DiTModel, schedule: NoiseSchedule, text: TextEmbedding, seed: int,
                 cfg_scale: float = 1.0, z_init: Optional[torch.Tensor] = None,
                 on_step: Optional[Callable[[int, float, float, torch.Tensor], None]] = None) -> torch.Tensor:
    """Run every step of the schedule from T to 0 and return the final latent."""
    z = gaussian(latent_shape(model), seed) if z_init is None else z_init.clone()
    times = schedule.timesteps()
    for index, (t, t_next) in enumerate(zip(times[:-1], times[1:])):
        out = model_output(model, z, t, text, cfg_scale)
        z = schedule.step(z, out, t, t_next)
        if on_step is not None:
            on_step(index, t, t_next, z)
    return z


def latent_to_image(latent: torch.Tensor, patch_size: int = 2) -> np.ndarray:
    image = decode_latent(latent.detach().cpu().numpy().astype(np.float32), patch_size)
    return np.clip(image, 0.0, 1.0)


def sample_image(model: DiTModel, schedule: NoiseSchedule, caption: str, seed: int,
                 cfg_scale: float = 1.0) -> np.ndarray:
    latent = sample_plain(model, schedule, model.embed_text(caption), seed, cfg_scale)
    return latent_to_image(latent, model.config.patch_size)
