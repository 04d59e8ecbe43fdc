"""
Toy dual-stream diffusion transformer.

Text tokens and image tokens keep separate projection weights but attend
jointly: each block concatenates the two query/key/value sequences, runs one
softmax attention over the union and splits the result back into streams.
"""
import logging
import math
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ShapeError
from models import BACKGROUNDS, COLORS, NUMBER_WORDS, PLURALS, SHAPES, ModelConfig

logger = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"

_FUNCTION_WORDS = ["a", "an", "the", "to", "of", "on", "in", "plain", "background"]
_RELATION_WORDS = ["left", "right", "above", "below", "top", "front", "behind", "hidden"]


def build_vocabulary() -> List[str]:
    words = [PAD, UNK] + _FUNCTION_WORDS + NUMBER_WORDS[1:]
    words += SHAPES + [PLURALS[s] for s in SHAPES] + COLORS + _RELATION_WORDS
    for name in BACKGROUNDS:
        words += name.split()
    vocabulary = []
    for word in words:
        if word not in vocabulary:
            vocabulary.append(word)
    return vocabulary


VOCABULARY = build_vocabulary()
_WORD_RE = re.compile(r"[a-z]+|\d+")


def caption_words(caption: str) -> List[str]:
    words = []
    for word in _WORD_RE.findall(caption.lower()):
        if word.isdigit() and 0 < int(word) < len(NUMBER_WORDS):
            word = NUMBER_WORDS[int(word)]
        words.append(word)
    return words


def tokenize(caption: str, vocabulary: Sequence[str] = VOCABULARY, max_len: int = 24) -> List[int]:
    index = {word: i for i, word in enumerate(vocabulary)}
    unk = index[UNK]
    return [index.get(word, unk) for word in caption_words(caption)][:max_len]


def in_vocabulary(caption: str, vocabulary: Sequence[str] = VOCABULARY) -> bool:
    known = set(vocabulary) - {PAD, UNK}
    words = caption_words(caption)
    return bool(words) and all(word in known for word in words)


@dataclass(frozen=True)
class TextEmbedding:
    vectors: torch.Tensor   # (B, L, d)
    mask: torch.Tensor      # (B, L) True for real tokens

    @property
    def length(self) -> int:
        return self.vectors.shape[1]

    def expand(self, batch: int) -> "TextEmbedding":
        if self.vectors.shape[0] == batch:
            return self
        return TextEmbedding(self.vectors.expand(batch, -1, -1), self.mask.expand(batch, -1))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1], shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class JointAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.width = width
        self.heads = heads
        self.qkv_y = nn.Linear(width, 3 * width)
        self.qkv_z = nn.Linear(width, 3 * width)
        self.out_y = nn.Linear(width, width)
        self.out_z = nn.Linear(width, width)
        self.ln_y1 = nn.LayerNorm(width)
        self.ln_z1 = nn.LayerNorm(width)
        self.ln_y2 = nn.LayerNorm(width)
        self.ln_z2 = nn.LayerNorm(width)
        self.ff_y = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(), nn.Linear(ff_mult * width, width))
        self.ff_z = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(), nn.Linear(ff_mult * width, width))

    def forward(self, y: torch.Tensor, z: torch.Tensor, y_mask: Optional[torch.Tensor] = None):
        a_y, a_z = joint_self_attention(self, self.ln_y1(y), self.ln_z1(z), y_mask)
        y = y + a_y
        z = z + a_z
        y = y + self.ff_y(self.ln_y2(y))
        z = z + self.ff_z(self.ln_z2(z))
        return y, z


def joint_self_attention(block: JointAttentionBlock, y: torch.Tensor, z: torch.Tensor,
                         y_mask: Optional[torch.Tensor] = None, return_weights: bool = False):
    """
    Joint attention over [y ; z] with per-stream projections.

    y: (B, L_y, d) text stream, z: (B, L_z, d) image stream, y_mask: (B, L_y)
    marking real text tokens (padding is never attended to). Returns
    (y', z') with the original lengths, plus the (B, heads, L, L) weights
    when requested.
    """
    if y.ndim != 3 or z.ndim != 3:
        raise ShapeError(f"expected (B, L, d) streams, got {tuple(y.shape)} and {tuple(z.shape)}")
    if y.shape[0] != z.shape[0] or y.shape[2] != block.width or z.shape[2] != block.width:
        raise ShapeError(f"streams {tuple(y.shape)} and {tuple(z.shape)} do not match width {block.width}")

    batch, len_y, width = y.shape
    len_z = z.shape[1]
    heads = block.heads
    head_dim = width // heads

    qkv = torch.cat([block.qkv_y(y), block.qkv_z(z)], dim=1)          # (B, L, 3d)
    q, k, v = qkv.chunk(3, dim=-1)

    def _split_heads(x):
        return x.view(batch, len_y + len_z, heads, head_dim).transpose(1, 2)

    q, k, v = _split_heads(q), _split_heads(k), _split_heads(v)
    scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
    if y_mask is not None and len_y > 0:
        if tuple(y_mask.shape) != (batch, len_y):
            raise ShapeError(f"text mask {tuple(y_mask.shape)} does not match text stream {(batch, len_y)}")
        key_mask = torch.cat([y_mask.bool(), torch.ones(batch, len_z, dtype=torch.bool, device=z.device)], dim=1)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = torch.softmax(scores, dim=-1)

    out = (weights @ v).transpose(1, 2).reshape(batch, len_y + len_z, width)
    y_out = block.out_y(out[:, :len_y])
    z_out = block.out_z(out[:, len_y:])
    if return_weights:
        return y_out, z_out, weights
    return y_out, z_out


class DiTModel(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), vocabulary: Sequence[str] = VOCABULARY):
        super().__init__()
        self.config = config
        self.vocabulary = list(vocabulary)
        width = config.width
        self.grid_size = config.canvas_size // config.patch_size
        self.channels = 3 * config.patch_size ** 2
        self.num_tokens = self.grid_size ** 2

        self.patch_in = nn.Linear(self.channels, width)
        self.pos_embedding = nn.Parameter(torch.zeros(self.num_tokens, width))
        nn.init.normal_(self.pos_embedding, mean=0.0, std=0.02)
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

        self.token_embedding = nn.Embedding(len(self.vocabulary), width)
        self.text_pos_embedding = nn.Parameter(torch.zeros(config.max_text_len, width))
        nn.init.normal_(self.text_pos_embedding, mean=0.0, std=0.02)

        self.blocks = nn.ModuleList([JointAttentionBlock(width, config.heads, config.ff_mult)
                                     for _ in range(config.depth)])
        self.ln_final = nn.LayerNorm(width)
        self.patch_out = nn.Linear(width, self.channels)
        nn.init.zeros_(self.patch_out.weight)
        nn.init.zeros_(self.patch_out.bias)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # ---------- text ----------

    def embed_token_ids(self, token_ids: Sequence[int], position_ids: Optional[Sequence[int]] = None) -> TextEmbedding:
        ids = torch.as_tensor(list(token_ids), dtype=torch.long, device=self.pos_embedding.device)
        if ids.numel() > self.config.max_text_len:
            raise ShapeError(f"text of {ids.numel()} tokens exceeds {self.config.max_text_len}")
        if position_ids is None:
            positions = torch.arange(ids.numel(), device=ids.device)
        else:
            positions = torch.as_tensor(list(position_ids), dtype=torch.long, device=ids.device)
        vectors = self.token_embedding(ids) + self.text_pos_embedding[positions]
        mask = torch.ones(1, ids.numel(), dtype=torch.bool, device=ids.device)
        return TextEmbedding(vectors[None], mask)

    def embed_text(self, caption: str) -> TextEmbedding:
        return self.embed_token_ids(tokenize(caption, self.vocabulary, self.config.max_text_len))

    def embed_batch(self, token_batches: Sequence[Sequence[int]]) -> TextEmbedding:
        """Pad a batch of token id lists to max_text_len."""
        length = self.config.max_text_len
        pad = self.vocabulary.index(PAD)
        ids = torch.full((len(token_batches), length), pad, dtype=torch.long, device=self.pos_embedding.device)
        mask = torch.zeros(len(token_batches), length, dtype=torch.bool, device=ids.device)
        for row, tokens in enumerate(token_batches):
            tokens = list(tokens)[:length]
            if tokens:
                ids[row, :len(tokens)] = torch.as_tensor(tokens, dtype=torch.long)
                mask[row, :len(tokens)] = True
        vectors = self.token_embedding(ids) + self.text_pos_embedding[None]
        return TextEmbedding(vectors, mask)

    def empty_text(self) -> TextEmbedding:
        return self.embed_token_ids([])

    # ---------- image ----------

    def forward_tokens(self, tokens: torch.Tensor, position_ids: torch.Tensor, t: torch.Tensor,
                       text: TextEmbedding) -> torch.Tensor:
        """
        tokens: (B, N, C) latent cells, position_ids: (N,) indices into the
        canvas-wide positional table, t: (B,). Returns (B, N, C).
        """
        if tokens.ndim != 3 or tokens.shape[-1] != self.channels:
            raise ShapeError(f"expected (B, N, {self.channels}) tokens, got {tuple(tokens.shape)}")
        batch = tokens.shape[0]
        text = text.expand(batch)

        z = self.patch_in(tokens) + self.pos_embedding[position_ids][None]
        z = z + self.time_mlp(timestep_embedding(t.to(z.dtype), self.config.width))[:, None]
        y = text.vectors
        for block in self.blocks:
            y, z = block(y, z, text.mask)
        return self.patch_out(self.ln_final(z))

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, text: TextEmbedding) -> torch.Tensor:
        """z_t: (B, h, w, C) -> model output of the same shape."""
        expected = (self.grid_size, self.grid_size, self.channels)
        if z_t.ndim != 4 or tuple(z_t.shape[1:]) != expected:
            raise ShapeError(f"expected latent (B, {expected}), got {tuple(z_t.shape)}")
        batch = z_t.shape[0]
        positions = torch.arange(self.num_tokens, device=z_t.device)
        out = self.forward_tokens(z_t.reshape(batch, self.num_tokens, self.channels), positions, t, text)
        return out.reshape(z_t.shape)


def predict(model: DiTModel, z_t: torch.Tensor, t: float, text_embedding: TextEmbedding) -> torch.Tensor:
    """Model output (velocity or noise, by schedule) for one latent (h, w, C) or a batch."""
    single = z_t.ndim == 3
    batch = z_t[None] if single else z_t
    if batch.ndim != 4:
        raise ShapeError(f"expected (h, w, C) latent, got {tuple(z_t.shape)}")
    times = torch.full((batch.shape[0],), float(t), dtype=batch.dtype, device=batch.device)
    with torch.no_grad():
        out = model(batch, times, text_embedding)
    return out[0] if single else out


def build_model(config: ModelConfig, seed: int = 0) -> DiTModel:
    torch.manual_seed(seed)
    model = DiTModel(config)
    logger.info("built DiT with %d parameters (depth %d, width %d)", model.parameter_count(), config.depth, config.width)
    return model


def region_tokens(z: torch.Tensor, mask) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gather the latent cells of a region: ((1, n, C) tokens, (n,) global positions)."""
    flat_mask = torch.as_tensor(mask, dtype=torch.bool, device=z.device).reshape(-1)
    positions = torch.nonzero(flat_mask, as_tuple=False).reshape(-1)
    tokens = z.reshape(-1, z.shape[-1])[positions]
    return tokens[None], positions
