"""Single diffusion loss, condition dropout and the two-stage curriculum."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .conditioner import ConditionerConfig, LoraConfig
from .diffusion import IDENTITY, UNetConfig
from .errors import MissingPrerequisite, MissingTarget, ShapeError
from .media import DatasetManifest, InstructionSample, uniform_indices
from .model import VeggieModel, load_checkpoint, params_digest, read_header, save_checkpoint
from .schedule import NoiseSchedule, add_noise

log = logging.getLogger(__name__)

GROUPS = (
    "conditioner.backbone",
    "conditioner.queries",
    "conditioner.alignment",
    "conditioner.lora",
    "unet.spatial",
    "unet.temporal",
)
STAGE_TRAINABLE = {
    1: ("conditioner.queries", "conditioner.alignment", "unet.spatial"),
    2: ("conditioner.lora", "conditioner.queries", "conditioner.alignment", "unet.spatial", "unet.temporal"),
}
STAGE_LR = {1: 1e-4, 2: 5e-4}


@dataclass(frozen=True)
class CondDropout:
    """Mutually exclusive probabilities of nulling text only, video only, or both."""

    p_text: float = 0.05
    p_video: float = 0.05
    p_both: float = 0.05

    def __post_init__(self):
        if min(self.p_text, self.p_video, self.p_both) < 0 or self.p_text + self.p_video + self.p_both > 1:
            raise ValueError("dropout probabilities must be non-negative and sum to at most 1")

    def draw(self, batch: int, rng: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns boolean ``(null_text, null_video)`` masks of length ``batch``."""
        u = torch.rand(batch, generator=rng, dtype=torch.float64)
        text_only = u < self.p_text
        video_only = (u >= self.p_text) & (u < self.p_text + self.p_video)
        both = (u >= self.p_text + self.p_video) & (u < self.p_text + self.p_video + self.p_both)
        return text_only | both, video_only | both


NO_DROPOUT = CondDropout(0.0, 0.0, 0.0)


@dataclass
class TensorBatch:
    source: torch.Tensor  # (B, n, C, H, W) pixels in [0, 1]
    target: torch.Tensor | None
    instructions: list[str]

    @classmethod
    def from_samples(cls, samples: Sequence[InstructionSample], dtype=torch.float32) -> "TensorBatch":
        def stack(clips):
            return torch.from_numpy(np.stack([c.frames.transpose(0, 3, 1, 2) for c in clips])).to(dtype)

        shapes = {s.source.shape for s in samples}
        if len(shapes) != 1:
            raise ShapeError(f"batch mixes clip shapes {sorted(shapes)}")
        targets = [s.target for s in samples]
        if any(t is None for t in targets):
            missing = [i for i, t in enumerate(targets) if t is None]
            raise MissingTarget(f"batch samples {missing} carry no target video")
        return cls(stack([s.source for s in samples]), stack(targets), [s.instruction for s in samples])


def diffusion_loss(model, conditioner, batch, schedule: NoiseSchedule, dropout: CondDropout = CondDropout(),
                   rng: torch.Generator | None = None, codec=IDENTITY, t=None, eps=None):
    """Mean squared error between the injected noise and the model's prediction.

    ``batch`` is a list of samples or a :class:`TensorBatch`.  ``t`` and ``eps``
    may be fixed for deterministic evaluation; otherwise they are drawn from
    ``rng``.
    """
    if not isinstance(batch, TensorBatch):
        batch = TensorBatch.from_samples(batch, dtype=next(model.parameters()).dtype)
    if batch.target is None:
        raise MissingTarget("diffusion loss needs target videos")
    b, n = batch.source.shape[:2]
    z0 = codec.encode(batch.target)
    c_video = codec.encode(batch.source)
    if t is None:
        t = torch.randint(1, schedule.T_max + 1, (b,), generator=rng)
    t = torch.as_tensor(t).expand(b) if torch.as_tensor(t).ndim == 0 else torch.as_tensor(t)
    if eps is None:
        eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_t = add_noise(schedule, z0, t, eps)

    cond = conditioner(batch.source, batch.instructions)
    null_text, null_video = dropout.draw(b, rng)
    if bool(null_text.any()):
        null = conditioner.null_condition(n, b)
        cond = torch.where(null_text[:, None, None, None], null, cond)
    if bool(null_video.any()):
        c_video = torch.where(null_video[:, None, None, None, None], torch.zeros_like(c_video), c_video)
    pred = model(z_t, t, c_video, cond)
    return ((eps - pred) ** 2).mean()


# -- curriculum ----------------------------------------------------------------


@dataclass
class StagePlan:
    stage: int = 1
    steps: int = 1000
    lr: float | None = None
    batch: int = 8
    frames_per_sample: int | None = None
    cond_dropout: CondDropout = field(default_factory=CondDropout)
    trainable: tuple[str, ...] | None = None
    frozen: tuple[str, ...] | None = None
    checkpoint_every: int = 0
    out_dir: str | None = None
    init_checkpoint: str | None = None
    seed: int = 0
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    lora: LoraConfig = field(default_factory=LoraConfig)
    conditioner: ConditionerConfig | None = None
    unet: UNetConfig | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if isinstance(self.cond_dropout, dict):
            self.cond_dropout = CondDropout(**self.cond_dropout)
        if isinstance(self.lora, dict):
            self.lora = LoraConfig(**self.lora)
        if isinstance(self.conditioner, dict):
            self.conditioner = ConditionerConfig(**self.conditioner)
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if self.lr is None:
            self.lr = STAGE_LR[self.stage]
        if self.frames_per_sample is None:
            self.frames_per_sample = 1 if self.stage == 1 else 8
        if self.stage == 1 and self.frames_per_sample != 1:
            raise ValueError("stage 1 trains on single frames")
        if self.trainable is None:
            self.trainable = STAGE_TRAINABLE[self.stage]
        self.trainable = tuple(self.trainable)
        if self.frozen is None:
            self.frozen = tuple(g for g in GROUPS if g not in self.trainable)
        self.frozen = tuple(self.frozen)
        unknown = (set(self.trainable) | set(self.frozen)) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        if set(self.trainable) & set(self.frozen):
            raise ValueError("a parameter group cannot be both trainable and frozen")

    def to_json(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        d["frozen"] = list(self.frozen)
        return d


@dataclass
class TrainReport:
    stage: int
    losses: list[float]
    final_ema_loss: float
    wall_time: float
    seed: int
    frozen_digest_before: str
    frozen_digest_after: str
    checkpoints: list[str] = field(default_factory=list)
    model: VeggieModel | None = field(default=None, repr=False)

    def to_json(self, include_timing: bool = False) -> dict:
        d = {
            "stage": self.stage,
            "seed": self.seed,
            "steps": len(self.losses),
            "final_ema_loss": self.final_ema_loss,
            "initial_mean_loss": float(np.mean(self.losses[:100])) if self.losses else None,
            "final_mean_loss": float(np.mean(self.losses[-100:])) if self.losses else None,
            "frozen_digest_before": self.frozen_digest_before,
            "frozen_digest_after": self.frozen_digest_after,
            "checkpoints": [Path(c).name for c in self.checkpoints],
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


class ClipBank:
    """All manifest samples held in memory as ``(N, n, C, H, W)`` tensors."""

    def __init__(self, samples: Sequence[InstructionSample], dtype=torch.float32):
        if not samples:
            raise ValueError("no training samples")
        tb = TensorBatch.from_samples(samples, dtype)
        self.source, self.target, self.instructions = tb.source, tb.target, tb.instructions

    @classmethod
    def from_manifest(cls, data: DatasetManifest, dtype=torch.float32) -> "ClipBank":
        return cls([data.load_sample(rec) for rec in data.records], dtype)

    def __len__(self):
        return self.source.shape[0]

    def draw(self, batch: int, frames: int, gen: torch.Generator) -> TensorBatch:
        idx = torch.randint(0, len(self), (batch,), generator=gen)
        n = self.source.shape[1]
        src, tgt = self.source[idx], self.target[idx]
        if frames == 1:
            f = torch.randint(0, n, (batch,), generator=gen)
            rows = torch.arange(batch)
            src, tgt = src[rows, f][:, None], tgt[rows, f][:, None]
        elif frames != n:
            keep = uniform_indices(n, frames)
            src, tgt = src[:, keep], tgt[:, keep]
        return TensorBatch(src, tgt, [self.instructions[i] for i in idx.tolist()])


def _frozen_named(model: VeggieModel, plan: StagePlan):
    groups = model.param_groups()
    return [item for g in plan.frozen for item in groups.get(g, [])]


def prepare_models(plan: StagePlan, models: VeggieModel | None) -> VeggieModel:
    if plan.stage == 1:
        if models is None:
            models = VeggieModel.create(plan.conditioner, plan.unet, seed=plan.seed)
        return models
    if models is None:
        if plan.init_checkpoint is None or not Path(plan.init_checkpoint).exists():
            raise MissingPrerequisite("stage 2 requires a stage-1 checkpoint")
        if read_header(plan.init_checkpoint).get("stage", 0) < 1:
            raise MissingPrerequisite(f"{plan.init_checkpoint} is not a stage-1 checkpoint")
        models = load_checkpoint(plan.init_checkpoint)
    elif models.stage < 1:
        raise MissingPrerequisite("stage 2 requires a model that completed stage 1")
    models.to_video(plan.lora)
    return models


def run_stage(plan: StagePlan, data: DatasetManifest | ClipBank, models: VeggieModel | None = None,
              codec=IDENTITY, progress_every: int = 0) -> TrainReport:
    """Optimise ``plan.trainable`` with AdamW; every frozen group stays bit-identical."""
    models = prepare_models(plan, models)
    bank = data if isinstance(data, ClipBank) else ClipBank.from_manifest(data)
    schedule = models.schedule
    groups = models.param_groups()
    for p in models.parameters():
        p.requires_grad_(False)
    params = []
    for g in plan.trainable:
        for _, p in groups.get(g, []):
            p.requires_grad_(True)
            params.append(p)
    if not params:
        raise ValueError("plan has no trainable parameters")
    frozen_before = params_digest(_frozen_named(models, plan))
    opt = torch.optim.AdamW(params, lr=plan.lr, betas=plan.betas, weight_decay=plan.weight_decay)
    gen = torch.Generator().manual_seed(plan.seed * 1000 + plan.stage)
    out_dir = Path(plan.out_dir) if plan.out_dir else None

    losses: list[float] = []
    ckpts: list[str] = []
    ema = None
    start = time.perf_counter()
    models.train()
    for step in range(1, plan.steps + 1):
        batch = bank.draw(plan.batch, plan.frames_per_sample, gen)
        loss = diffusion_loss(models.denoiser, models.conditioner, batch, schedule, plan.cond_dropout, gen, codec)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if plan.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, plan.grad_clip)
        opt.step()
        val = float(loss.detach())
        losses.append(val)
        ema = val if ema is None else 0.99 * ema + 0.01 * val
        if progress_every and step % progress_every == 0:
            log.info("stage %d step %d loss %.4f ema %.4f", plan.stage, step, val, ema)
        if out_dir and plan.checkpoint_every and step % plan.checkpoint_every == 0 and step < plan.steps:
            path = out_dir / f"stage{plan.stage}_step{step:06d}.ckpt"
            save_checkpoint(models, path, extra={"partial_stage": plan.stage, "step": step})
            ckpts.append(str(path))
    wall = time.perf_counter() - start
    models.eval()
    for p in models.parameters():
        p.requires_grad_(False)
    models.stage = plan.stage
    frozen_after = params_digest(_frozen_named(models, plan))
    if out_dir:
        path = out_dir / f"stage{plan.stage}.ckpt"
        save_checkpoint(models, path, extra={"seed": plan.seed, "steps": plan.steps})
        ckpts.append(str(path))
        write_loss_csv(out_dir / f"stage{plan.stage}_loss.csv", losses)
    return TrainReport(plan.stage, losses, float(ema if ema is not None else float("nan")), wall, plan.seed,
                       frozen_before, frozen_after, ckpts, model=models)


def write_loss_csv(path, losses: Sequence[float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])
