"""Dual-scale classifier-free guidance, DDIM/DDPM sampling and the editor."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .diffusion import IDENTITY, decode_latent, encode_latent
from .errors import NotInitialized
from .media import Skill, VideoClip
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class GuidanceConfig:
    g_T: float = 10.5
    g_V: float = 2.0
    steps: int = 50
    sampler: str = "ddim"
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.g_T) and np.isfinite(self.g_V)):
            raise ValueError("guidance scales must be finite")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


SEGMENTATION_SCALES = (14.5, 1.5)
EDITING_SCALES = (10.5, 2.0)
SKILL_GUIDANCE: Mapping[Skill, tuple[float, float]] = {
    s: SEGMENTATION_SCALES if s.is_segmentation else EDITING_SCALES for s in Skill
}


def scales_for(skill: Skill | str | None) -> tuple[float, float]:
    if skill is None:
        return EDITING_SCALES
    return SKILL_GUIDANCE[Skill.parse(skill)]


def combine_guidance(e_full, e_video, e_uncond, g_T: float, g_V: float):
    """e(z,0,0) + g_T (e(z,V,T) - e(z,V,0)) + g_V (e(z,V,0) - e(z,0,0)).

    Evaluated as a weighted sum so that (1, 1) returns ``e_full`` and (0, 0)
    returns ``e_uncond`` exactly, without cancellation round-off.
    """
    return g_T * e_full + (g_V - g_T) * e_video + (1.0 - g_V) * e_uncond


def guided_noise(model: Callable, z, t, c_video, c_task, null_task, g_T: float, g_V: float):
    """One batched forward over the three condition variants, then combine.

    ``z, c_video``: ``(B, n, c, h, w)``; ``c_task, null_task``: ``(B, n, m, d)``.
    """
    b = z.shape[0]
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t.expand(b)
    zz = torch.cat([z, z, z])
    src = torch.cat([c_video, c_video, torch.zeros_like(c_video)])
    cond = torch.cat([c_task, null_task, null_task])
    tt = torch.cat([t, t, t])
    out = model(zz, tt, src, cond)
    e_full, e_video, e_uncond = out[:b], out[b:2 * b], out[2 * b:]
    return combine_guidance(e_full, e_video, e_uncond, g_T, g_V)


def noise_stream(seed: int, stream: int, shape, dtype=torch.float32) -> torch.Tensor:
    """Counter-based normal draws: stream ``k`` of ``seed`` is independent of batch layout."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return torch.from_numpy(gen.standard_normal(tuple(shape))).to(dtype)


def timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    steps = min(steps, schedule.T_max)
    ts = np.rint(np.linspace(schedule.T_max, 1, steps)).astype(int)
    return sorted(set(ts.tolist()), reverse=True)


@torch.no_grad()
def sample(eps_fn: Callable, shape, schedule: NoiseSchedule, cfg: GuidanceConfig, clip_x0: bool = True,
           dtype=torch.float32, z_init: torch.Tensor | None = None) -> torch.Tensor:
    """Generalised DDIM loop; ``sampler='ddpm'`` is the ancestral case (eta = 1).

    ``eps_fn(z, t)`` returns the (guided) noise estimate for integer ``t``.
    """
    eta = 1.0 if cfg.sampler == "ddpm" else cfg.eta
    z = noise_stream(cfg.seed, 0, shape, dtype) if z_init is None else z_init.to(dtype)
    ts = timesteps(schedule, cfg.steps)
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        a_t = float(schedule.abar(t))
        a_prev = float(schedule.abar(t_prev))
        eps = eps_fn(z, t)
        x0 = (z - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        if clip_x0:
            x0 = x0.clamp(-1.0, 1.0)
            eps = (z - np.sqrt(a_t) * x0) / np.sqrt(1.0 - a_t)
        sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)) if t_prev > 0 else 0.0
        z = np.sqrt(a_prev) * x0 + np.sqrt(max(1.0 - a_prev - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            z = z + sigma * noise_stream(cfg.seed, k + 1, shape, dtype)
    return z


class Editor:
    """Instruction-driven video editing with a trained :class:`~veggie.model.VeggieModel`."""

    def __init__(self, model=None, codec=IDENTITY):
        self.model = model
        self.codec = codec

    @classmethod
    def from_checkpoint(cls, path, codec=IDENTITY) -> "Editor":
        from .model import load_checkpoint

        return cls(load_checkpoint(path), codec)

    def resolve(self, skill_hint=None, cfg: GuidanceConfig | None = None) -> GuidanceConfig:
        if cfg is not None:
            return cfg
        g_T, g_V = scales_for(skill_hint)
        return GuidanceConfig(g_T=g_T, g_V=g_V)

    @torch.no_grad()
    def edit(self, source: VideoClip, instruction: str, references: Sequence = (), skill_hint=None,
             cfg: GuidanceConfig | None = None) -> tuple[VideoClip, dict]:
        if self.model is None:
            raise NotInitialized("no checkpoint loaded")
        cfg = self.resolve(skill_hint, cfg)
        model = self.model
        model.eval()
        dtype = next(model.parameters()).dtype
        cond = model.conditioner.encode(source, instruction, references).to(dtype)[None]
        n = source.n
        null = model.conditioner.null_condition(n, 1).to(dtype)
        c_video = encode_latent(source, self.codec, dtype)[None]
        schedule = model.schedule

        def eps_fn(z, t):
            return guided_noise(model.denoiser, z, t, c_video, cond, null, cfg.g_T, cfg.g_V)

        z0 = sample(eps_fn, c_video.shape, schedule, cfg, clip_x0=self.codec is IDENTITY, dtype=dtype)
        out = decode_latent(z0[0], self.codec, fps=source.fps)
        run_log = {
            "instruction": instruction,
            "skill": Skill.parse(skill_hint).value if skill_hint is not None else None,
            "references": len(references),
            "guidance": asdict(cfg),
        }
        return out, run_log
