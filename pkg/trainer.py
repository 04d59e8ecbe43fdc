"""
Training loop, gradient check and the checkpoint file format.

Checkpoint layout (little-endian):

    8 bytes   magic b"TOYDIT\\0\\0"
    uint32    format version
    uint32    header length in bytes
    header    UTF-8 JSON: tensors (name, shape, offset, count), vocabulary,
              schedule, model/train config, config hash, step
    data      float32 values of every tensor, in header order
"""
import copy
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from dit_model import DiTModel, tokenize
from errors import CheckpointError, DivergenceError
from latent_codec import encode_latent
from models import ModelConfig, TrainConfig, config_hash
from schedules import NoiseSchedule

logger = logging.getLogger(__name__)

MAGIC = b"TOYDIT\0\0"
FORMAT_VERSION = 1


@dataclass
class TrainResult:
    model: DiTModel
    schedule: NoiseSchedule
    losses: List[float] = field(default_factory=list)
    step: int = 0
    checkpoint_path: Optional[Path] = None


# ================== Checkpoint I/O ==================

def save_checkpoint(path, model: DiTModel, schedule: NoiseSchedule,
                    train_config: Optional[TrainConfig] = None, step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        values = tensor.detach().cpu().numpy().astype("<f4").ravel()
        tensors.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": int(values.size)})
        chunks.append(values.tobytes())
        offset += values.size

    header = {
        "format_version": FORMAT_VERSION,
        "tensors": tensors,
        "vocabulary": model.vocabulary,
        "schedule": schedule.to_dict(),
        "model_config": model.config.model_dump(mode="json"),
        "train_config": train_config.model_dump(mode="json") if train_config else None,
        "config_hash": config_hash(train_config) if train_config else config_hash(model.config),
        "step": step,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for chunk in chunks:
            fh.write(chunk)
    logger.info("saved checkpoint %s (step %d, %d tensors)", path, step, len(tensors))
    return path


def read_checkpoint_header(path) -> Tuple[dict, int]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        prefix = fh.read(8)
        if len(prefix) != 8:
            raise CheckpointError(f"{path} is truncated")
        version, header_len = struct.unpack("<II", prefix)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path} has an unreadable header: {exc}") from exc
    return header, len(MAGIC) + 8 + header_len


def load_checkpoint(path) -> Tuple[DiTModel, NoiseSchedule, dict]:
    header, data_start = read_checkpoint_header(path)
    config = ModelConfig(**header["model_config"])
    model = DiTModel(config, header["vocabulary"])

    data = np.frombuffer(Path(path).read_bytes()[data_start:], dtype="<f4")
    expected = model.state_dict()
    names = {entry["name"] for entry in header["tensors"]}
    if names != set(expected):
        raise CheckpointError(f"{path} tensors do not match the model: {sorted(names ^ set(expected))}")

    state = {}
    for entry in header["tensors"]:
        target_shape = tuple(expected[entry["name"]].shape)
        if tuple(entry["shape"]) != target_shape:
            raise CheckpointError(f"{entry['name']}: shape {entry['shape']} != {list(target_shape)}")
        end = entry["offset"] + entry["count"]
        if end > data.size:
            raise CheckpointError(f"{path} is truncated at {entry['name']}")
        values = data[entry["offset"]:end].reshape(target_shape)
        state[entry["name"]] = torch.from_numpy(values.astype(np.float32))
    model.load_state_dict(state)
    model.eval()

    schedule = NoiseSchedule(**header["schedule"])
    logger.info("loaded %s: %d parameters, schedule %s, step %d",
                path, model.parameter_count(), schedule.kind, header.get("step", 0))
    return model, schedule, header


# ================== Training ==================

def _prepare(corpus: Sequence, model: DiTModel) -> Tuple[torch.Tensor, List[List[int]]]:
    latents = np.stack([encode_latent(np.asarray(s.image, dtype=np.float32), model.config.patch_size) for s in corpus])
    tokens = [tokenize(s.caption, model.vocabulary, model.config.max_text_len) for s in corpus]
    return torch.from_numpy(latents), tokens


def training_loss(model: DiTModel, schedule: NoiseSchedule, x0: torch.Tensor, noise: torch.Tensor,
                  t: torch.Tensor, token_batches: Sequence[Sequence[int]]) -> torch.Tensor:
    alpha, sigma = schedule.coefficients(t)
    shape = (-1,) + (1,) * (x0.ndim - 1)
    x_t = alpha.view(shape) * x0 + sigma.view(shape) * noise
    target = schedule.training_target(x0, noise)
    out = model(x_t, t, model.embed_batch(token_batches))
    return F.mse_loss(out, target)


def train(model: DiTModel, corpus: Sequence, train_config: TrainConfig,
          checkpoint_path=None, start_step: int = 0, show_progress: bool = True) -> TrainResult:
    """
    Velocity (rectified flow) or noise (DDIM) regression on the corpus.

    ``start_step`` resumes a run: step numbering and the loss curve continue
    from it and the batch stream is reseeded with seed + start_step. The
    optimizer state is not part of the checkpoint and starts fresh.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    schedule = NoiseSchedule(kind=train_config.schedule_kind)
    samples = list(corpus)
    if train_config.overfit_samples:
        samples = samples[:train_config.overfit_samples]

    torch.manual_seed(train_config.seed)
    latents, tokens = _prepare(samples, model)
    generator = torch.Generator().manual_seed(train_config.seed + start_step)
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay)

    model.train()
    losses = []
    progress = tqdm(range(start_step, train_config.steps), desc="train", disable=not show_progress)
    for step in progress:
        index = torch.randint(len(samples), (train_config.batch_size,), generator=generator)
        x0 = latents[index]
        noise = torch.randn(x0.shape, generator=generator)
        t = torch.rand(train_config.batch_size, generator=generator) * schedule.T
        drop = torch.rand(train_config.batch_size, generator=generator) < train_config.caption_dropout
        batch_tokens = [[] if drop[k] else tokens[i] for k, i in enumerate(index.tolist())]

        loss = training_loss(model, schedule, x0, noise, t, batch_tokens)
        if not torch.isfinite(loss):
            logger.error("loss became %s at step %d", loss.item(), step)
            raise DivergenceError(f"non-finite loss at step {step}")

        optimizer.zero_grad()
        loss.backward()
        if train_config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
        optimizer.step()

        losses.append(loss.item())
        if train_config.log_every and (step + 1) % train_config.log_every == 0:
            progress.set_postfix(loss=f"{np.mean(losses[-train_config.log_every:]):.4f}")
            logger.debug("step %d loss %.5f", step + 1, losses[-1])
    model.eval()

    result = TrainResult(model=model, schedule=schedule, losses=losses, step=max(train_config.steps, start_step))
    if checkpoint_path is not None:
        result.checkpoint_path = save_checkpoint(checkpoint_path, model, schedule, train_config, result.step)
        save_loss_curve(result.checkpoint_path, losses, start_step)
    return result


def loss_curve_path(checkpoint_path) -> Path:
    checkpoint_path = Path(checkpoint_path)
    return checkpoint_path.with_name(checkpoint_path.name + ".loss.json")


def save_loss_curve(checkpoint_path, losses: Sequence[float], start_step: int = 0) -> Path:
    path = loss_curve_path(checkpoint_path)
    previous = {"step": [], "loss": []}
    if start_step and path.is_file():
        previous = json.loads(path.read_text())
        keep = [k for k, s in enumerate(previous["step"]) if s < start_step]
        previous = {"step": [previous["step"][k] for k in keep], "loss": [previous["loss"][k] for k in keep]}
    previous["step"] += list(range(start_step, start_step + len(losses)))
    previous["loss"] += [float(v) for v in losses]
    path.write_text(json.dumps(previous))
    return path


def evaluate_loss(model: DiTModel, corpus: Sequence, schedule: NoiseSchedule, seed: int = 0,
                  repeats: int = 4) -> float:
    """Mean training loss over the whole corpus at fixed noise draws."""
    latents, tokens = _prepare(list(corpus), model)
    generator = torch.Generator().manual_seed(seed)
    values = []
    with torch.no_grad():
        for _ in range(repeats):
            noise = torch.randn(latents.shape, generator=generator)
            t = torch.rand(latents.shape[0], generator=generator) * schedule.T
            values.append(training_loss(model, schedule, latents, noise, t, tokens).item())
    return float(np.mean(values))


# ================== Gradient check ==================

@dataclass
class GradientCheckResult:
    max_relative_error: float
    checked: int


def gradient_check(model: DiTModel, corpus: Sequence, schedule: NoiseSchedule, fraction: float = 0.01,
                   seed: int = 0, eps: float = 1e-6, max_checked: Optional[int] = None) -> GradientCheckResult:
    """Central finite differences vs autograd on a random subset of weights, in float64."""
    checked_model = copy.deepcopy(model).double()
    checked_model.eval()
    samples = list(corpus)
    latents, tokens = _prepare(samples, checked_model)
    latents = latents.double()
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(latents.shape, generator=generator, dtype=torch.float64)
    t = torch.rand(latents.shape[0], generator=generator, dtype=torch.float64)

    def loss_fn():
        return training_loss(checked_model, schedule, latents, noise, t, tokens)

    checked_model.zero_grad()
    loss_fn().backward()

    params = [p for p in checked_model.parameters() if p.requires_grad]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    count = max(1, int(round(fraction * total)))
    if max_checked is not None:
        count = min(count, max_checked)
    picks = torch.randperm(total, generator=generator)[:count].tolist()
    bounds = np.cumsum([0] + sizes)

    worst = 0.0
    with torch.no_grad():
        for flat_index in picks:
            which = int(np.searchsorted(bounds, flat_index, side="right") - 1)
            param = params[which]
            local = flat_index - int(bounds[which])
            view = param.view(-1)
            analytic = param.grad.view(-1)[local].item()
            original = view[local].item()
            view[local] = original + eps
            plus = loss_fn().item()
            view[local] = original - eps
            minus = loss_fn().item()
            view[local] = original
            numeric = (plus - minus) / (2 * eps)
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, error)
    return GradientCheckResult(max_relative_error=worst, checked=count)
