"""Toy multimodal conditioner producing grounded task queries.

A byte-level text tokenizer, a patch embedding for frames and reference
images, and a bidirectional transformer encoder stand in for the MLLM.
``m`` learnable query tokens per frame are appended to the input sequence
and read out in parallel after one forward pass; a single affine layer maps
their hidden states into the diffusion model's condition width.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import AlreadyAdapted, EmptyCondition, InsufficientData, ShapeError
from .media import InstructionSample, VideoClip

N_SPECIAL = 4
PAD_ID, BOS_ID, EOS_ID, SEP_ID = 256, 257, 258, 259

# token-type ids
T_FRAME, T_TEXT, T_REF, T_QUERY = 0, 1, 2, 3


@dataclass
class LoraConfig:
    rank: int = 64
    alpha: float = 16.0
    dropout: float = 0.05

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("LoRA dropout must be in [0, 1)")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class ConditionerConfig:
    d_model: int = 256
    d_cond: int = 128
    layers: int = 4
    heads: int = 4
    m: int = 32
    vocab: int = 256 + N_SPECIAL
    patch: int = 8
    channels: int = 3
    max_text: int = 96
    mlp_ratio: int = 4
    lora: LoraConfig | None = None

    def __post_init__(self):
        if isinstance(self.lora, dict):
            self.lora = LoraConfig(**self.lora)
        for name in ("d_model", "d_cond", "m", "layers", "heads", "patch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    def to_json(self) -> dict:
        return asdict(self)


def tokenize(text: str, max_len: int) -> list[int]:
    ids = [BOS_ID] + list(text.encode("utf-8"))[: max_len - 2] + [EOS_ID]
    return ids


def sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer sinusoidal encoding, ``(*positions.shape, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = positions.to(torch.float64)[..., None] * freqs
    enc = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        enc = F.pad(enc, (0, 1))
    return enc


class LoRALinear(nn.Module):
    """``base(x) + (alpha / rank) * B(A(dropout(x)))`` with B zero-initialised."""

    def __init__(self, base: nn.Linear, cfg: LoraConfig):
        super().__init__()
        self.base = base
        self.scale = cfg.scale
        self.lora_A = nn.Linear(base.in_features, cfg.rank, bias=False)
        self.lora_B = nn.Linear(cfg.rank, base.out_features, bias=False)
        self.drop = nn.Dropout(cfg.dropout)
        nn.init.normal_(self.lora_A.weight, std=1.0 / cfg.rank)
        nn.init.zeros_(self.lora_B.weight)
        self.lora_A.to(base.weight.dtype)
        self.lora_B.to(base.weight.dtype)

    def forward(self, x):
        return self.base(x) + self.scale * self.lora_B(self.lora_A(self.drop(x)))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None):
        b, L, d = x.shape
        h = self.heads

        def split(t):
            return t.view(b, L, h, d // h).transpose(1, 2)

        attn_mask = None
        if key_mask is not None:
            attn_mask = key_mask[:, None, None, :]
        out = F.scaled_dot_product_attention(split(self.q(x)), split(self.k(x)), split(self.v(x)), attn_mask=attn_mask)
        return self.o(out.transpose(1, 2).reshape(b, L, d))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.mlp(self.ln2(x))


class AlignmentNet(nn.Module):
    """Single affine layer into condition space; also owns the learned null tokens."""

    def __init__(self, d_model: int, d_cond: int, m: int):
        super().__init__()
        self.proj = nn.Linear(d_model, d_cond)
        self.null_tokens = nn.Parameter(torch.randn(m, d_cond) * 0.02)

    def forward(self, states):
        return self.proj(states)


class Conditioner(nn.Module):
    def __init__(self, config: ConditionerConfig | None = None):
        super().__init__()
        cfg = config or ConditionerConfig()
        self.config = cfg
        d = cfg.d_model
        self.tok_embed = nn.Embedding(cfg.vocab, d)
        self.patch_embed = nn.Conv2d(cfg.channels, d, cfg.patch, stride=cfg.patch)
        self.type_embed = nn.Embedding(4, d)
        self.layers = nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(d)
        self.queries = nn.Parameter(torch.randn(cfg.m, d) * 0.02)
        self.alignment = AlignmentNet(d, cfg.d_cond, cfg.m)
        self.adapted = False
        if cfg.lora is not None:
            lora, cfg.lora = cfg.lora, None
            self.apply_lora(lora)

    # -- parameter bookkeeping ---------------------------------------------

    @staticmethod
    def group_of(name: str) -> str:
        if ".lora_" in name:
            return "lora"
        if name == "queries":
            return "queries"
        if name.startswith("alignment."):
            return "alignment"
        return "backbone"

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {}
        for name, p in self.named_parameters():
            groups.setdefault(self.group_of(name), []).append((name, p))
        return groups

    def apply_lora(self, config: LoraConfig | None = None) -> None:
        """Wrap every attention projection with a zero-initialised low-rank residual.

        Freezes the backbone afterwards; only the adapters, queries and the
        alignment net stay trainable.
        """
        if self.adapted:
            raise AlreadyAdapted("LoRA already applied to this conditioner")
        config = config or LoraConfig()
        for layer in self.layers:
            for proj in ("q", "k", "v", "o"):
                setattr(layer.attn, proj, LoRALinear(getattr(layer.attn, proj), config))
        self.adapted = True
        self.config.lora = config
        for name, p in self.named_parameters():
            p.requires_grad_(self.group_of(name) != "backbone")

    # -- sequence assembly ---------------------------------------------------

    def _patchify(self, images: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        """``(k, C, H, W)`` in [0,1] -> ``(k, gh*gw, d)`` patch tokens."""
        cfg = self.config
        k, c, h, w = images.shape
        if c != cfg.channels:
            raise ShapeError(f"conditioner expects {cfg.channels} channels, got {c}")
        if h % cfg.patch or w % cfg.patch:
            raise ShapeError(f"patch size {cfg.patch} does not divide frame size {h}x{w}")
        x = self.patch_embed(images * 2.0 - 1.0)
        gh, gw = x.shape[-2:]
        return x.flatten(2).transpose(1, 2), gh, gw

    def _grid_pos(self, gh: int, gw: int, dtype) -> torch.Tensor:
        d = self.config.d_model
        rows = torch.arange(gh).repeat_interleave(gw)
        cols = torch.arange(gw).repeat(gh)
        return (sinusoidal(rows * 31 + 7, d) + sinusoidal(cols * 17 + 3, d)).to(dtype)

    def _sequence(self, frames: torch.Tensor, tokens: Sequence[int], refs: Sequence[torch.Tensor]):
        """Build the encoder input for one sample; returns (seq, query_offset)."""
        cfg = self.config
        d = cfg.d_model
        dtype = self.queries.dtype
        n = frames.shape[0]
        parts = []
        patches, gh, gw = self._patchify(frames)
        frame_pos = sinusoidal(torch.arange(n) * 101, d).to(dtype)
        patches = patches + self._grid_pos(gh, gw, dtype)[None] + frame_pos[:, None] + self.type_embed.weight[T_FRAME]
        parts.append(patches.reshape(-1, d))
        if tokens:
            ids = torch.tensor(tokens, dtype=torch.long)
            text = self.tok_embed(ids) + sinusoidal(torch.arange(len(tokens)), d).to(dtype) + self.type_embed.weight[T_TEXT]
            parts.append(text)
        for j, ref in enumerate(refs):
            rp, rh, rw = self._patchify(ref[None])
            rp = rp[0] + self._grid_pos(rh, rw, dtype) + sinusoidal(torch.tensor([1000 + 101 * j]), d).to(dtype) + self.type_embed.weight[T_REF]
            parts.append(rp)
        q = self.queries[None] + frame_pos[:, None] + self.type_embed.weight[T_QUERY]
        offset = sum(p.shape[0] for p in parts)
        parts.append(q.reshape(-1, d))
        return torch.cat(parts), offset

    def forward(self, frames: torch.Tensor, instructions: Sequence[str], references: Sequence[Sequence] | None = None):
        """Batched encode.

        frames: ``(B, n, C, H, W)`` pixels in [0, 1].  Returns ``(B, n, m, d_cond)``.
        """
        cfg = self.config
        b, n = frames.shape[:2]
        if len(instructions) != b:
            raise ShapeError("one instruction per batch element required")
        references = references or [()] * b
        seqs, offsets = [], []
        for i in range(b):
            refs = [_image_tensor(r, frames.dtype) for r in references[i]]
            text = instructions[i].strip()
            if not text and not refs:
                raise EmptyCondition("empty instruction and no reference images")
            toks = tokenize(instructions[i], cfg.max_text) if text else []
            seq, off = self._sequence(frames[i], toks, refs)
            seqs.append(seq)
            offsets.append(off)
        L = max(s.shape[0] for s in seqs)
        # left-pad so that query blocks line up at the end of every row
        x = frames.new_zeros(b, L, cfg.d_model)
        key_mask = torch.zeros(b, L, dtype=torch.bool)
        for i, s in enumerate(seqs):
            x[i, L - s.shape[0]:] = s
            key_mask[i, L - s.shape[0]:] = True
        mask = None if bool(key_mask.all()) else key_mask
        for layer in self.layers:
            x = layer(x, mask)
        x = self.final_norm(x)
        states = x[:, L - n * cfg.m:].reshape(b, n, cfg.m, cfg.d_model)
        return self.alignment(states)

    def null_condition(self, n: int, batch: int | None = None) -> torch.Tensor:
        if n < 1:
            raise ValueError("n must be >= 1")
        tok = self.alignment.null_tokens
        out = tok[None].expand(n, *tok.shape)
        if batch is not None:
            out = out[None].expand(batch, *out.shape)
        return out

    def encode(self, source, instruction: str, references: Iterable = ()) -> torch.Tensor:
        """Grounded task queries ``(n, m, d_cond)`` for a single clip."""
        frames = clip_tensor(source, self.queries.dtype)
        return self.forward(frames[None], [instruction], [list(references)])[0]


def clip_tensor(source, dtype=torch.float32) -> torch.Tensor:
    """VideoClip or ``(n, H, W, C)`` array -> ``(n, C, H, W)`` tensor."""
    if isinstance(source, VideoClip):
        arr = source.frames
    elif isinstance(source, torch.Tensor):
        return source.to(dtype)
    else:
        arr = np.asarray(source)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def _image_tensor(img, dtype) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        return img.to(dtype)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


# -- query-space analysis ----------------------------------------------------


@dataclass
class PCAResult:
    mean: np.ndarray
    axes: np.ndarray  # (k, d), rows orthonormal
    variances: np.ndarray
    total_variance: float

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.axes.T

    def reconstruction_error(self, x: np.ndarray) -> float:
        """Mean squared residual per sample (sum over features)."""
        centered = x - self.mean
        recon = centered @ self.axes.T @ self.axes
        return float(np.mean(np.sum((centered - recon) ** 2, axis=1)))


def pca(x: np.ndarray, k: int = 2) -> PCAResult:
    """Principal components via eigendecomposition of the sample covariance."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise InsufficientData("PCA needs at least two samples")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    axes = evecs[:, order].T
    # deterministic sign: largest-magnitude entry positive
    flip = np.sign(axes[np.arange(axes.shape[0]), np.argmax(np.abs(axes), axis=1)])
    axes = axes * np.where(flip == 0, 1.0, flip)[:, None]
    return PCAResult(mean, axes, np.clip(evals[order], 0.0, None), float(np.trace(cov)))


@dataclass
class QueryProjection:
    rows: list[tuple[str, float, float]]
    pca: PCAResult = field(repr=False)

    def to_csv(self) -> str:
        lines = ["skill,x,y"]
        lines += [f"{s},{x:.9g},{y:.9g}" for s, x, y in self.rows]
        return "\n".join(lines) + "\n"


@torch.no_grad()
def export_query_projection(conditioner: Conditioner, samples: Sequence[InstructionSample]) -> QueryProjection:
    if len(samples) < 2:
        raise InsufficientData("query projection needs at least two samples")
    was_training = conditioner.training
    conditioner.eval()
    try:
        pooled = np.stack([
            conditioner.encode(s.source, s.instruction, s.references).double().mean(dim=(0, 1)).numpy()
            for s in samples
        ])
    finally:
        conditioner.train(was_training)
    res = pca(pooled, 2)
    proj = res.transform(pooled)
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    rows = [(s.skill.value, float(p[0]), float(p[1])) for s, p in zip(samples, proj)]
    return QueryProjection(rows, res)
