"""Conditional denoising UNet with 2D -> 3D temporal inflation.

Latents are handled as ``(B, n, c, h, w)``.  Spatial layers fold the frame
axis into the batch; temporal attention blocks (video mode only) attend over
the frame axis at every spatial location.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioner import sinusoidal
from .errors import AlreadyInflated, ShapeError, TimestepError
from .media import VideoClip
from .schedule import NoiseSchedule

IMAGE2D = "image2d"
VIDEO3D = "video3d"


@dataclass
class UNetConfig:
    c_latent: int = 3
    base_width: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    # downsampling factors that get spatial (and, once inflated, temporal) attention
    attn_resolutions: tuple[int, ...] = (2, 4)
    d_cond: int = 128
    T_max: int = 1000
    heads: int = 4
    groups: int = 8
    # "v": eps = sqrt(abar) * F + sqrt(1 - abar) * z, so x0 errors are not scaled by 1/sqrt(abar)
    # "eps": the network output is the noise estimate directly
    output: str = "v"

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attn_resolutions = tuple(self.attn_resolutions)
        if self.output not in ("v", "eps"):
            raise ValueError(f"unknown output parameterisation {self.output!r}")

    @property
    def in_channels(self) -> int:
        # noisy latent concatenated with the source-video latent
        return 2 * self.c_latent

    def to_json(self) -> dict:
        return asdict(self)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        b, L, d = x.shape
        h = self.heads
        q = self.to_q(x).view(b, L, h, d // h).transpose(1, 2)
        k = self.to_k(context).view(b, context.shape[1], h, d // h).transpose(1, 2)
        v = self.to_v(context).view(b, context.shape[1], h, d // h).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(out.transpose(1, 2).reshape(b, L, d))


class SpatialTransformer(nn.Module):
    """Self-attention over pixels plus cross-attention to the frame's task tokens."""

    def __init__(self, ch: int, d_cond: int, heads: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, ch), ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.ln1 = nn.LayerNorm(ch)
        self.attn1 = Attention(ch, heads)
        self.ln2 = nn.LayerNorm(ch)
        self.attn2 = Attention(ch, heads, d_cond)
        self.ln3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, context):
        b, c, hh, ww = x.shape
        h = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        h = h + self.attn1(self.ln1(h))
        h = h + self.attn2(self.ln2(h), context)
        h = h + self.ff(self.ln3(h))
        h = h.transpose(1, 2).reshape(b, c, hh, ww)
        return x + self.proj_out(h)


class TemporalAttention(nn.Module):
    """Full attention across frames at each spatial location; zero output at init."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.ln = nn.LayerNorm(ch)
        self.attn = Attention(ch, heads)
        zero_module(self.attn.to_out)

    def forward(self, x, n: int):
        bn, c, hh, ww = x.shape
        b = bn // n
        h = x.view(b, n, c, hh, ww).permute(0, 3, 4, 1, 2).reshape(b * hh * ww, n, c)
        h = h + sinusoidal(torch.arange(n), c).to(h.dtype)[None]
        h = self.attn(self.ln(h))
        h = h.view(b, hh, ww, n, c).permute(0, 3, 4, 1, 2).reshape(bn, c, hh, ww)
        return x + h


class DenoiserModel(nn.Module):
    """epsilon-prediction UNet; ``mode`` is ``image2d`` until :func:`inflate`.

    With ``output="v"`` the last layer predicts ``v = sqrt(abar) eps - sqrt(1 - abar) x0``
    and the returned noise estimate is ``sqrt(abar) v + sqrt(1 - abar) z`` under the
    linear schedule.  Either way the forward pass returns epsilon.
    """

    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        cfg = config or UNetConfig()
        self.config = cfg
        self.mode = IMAGE2D
        base = cfg.base_width
        temb = 4 * base
        self.time_embed = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, base, 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsample = nn.ModuleList()
        chans = []
        ch = base
        ds = 1
        for i, mult in enumerate(cfg.channel_multipliers):
            out = base * mult
            self.down_res.append(ResBlock(ch, out, temb, cfg.groups))
            if ds in cfg.attn_resolutions:
                self.down_attn[str(i)] = SpatialTransformer(out, cfg.d_cond, cfg.heads, cfg.groups)
            ch = out
            chans.append(ch)
            if i < len(cfg.channel_multipliers) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                ds *= 2

        self.mid_res1 = ResBlock(ch, ch, temb, cfg.groups)
        self.mid_attn = SpatialTransformer(ch, cfg.d_cond, cfg.heads, cfg.groups)
        self.mid_res2 = ResBlock(ch, ch, temb, cfg.groups)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsample = nn.ModuleList()
        for j, i in enumerate(reversed(range(len(cfg.channel_multipliers)))):
            out = base * cfg.channel_multipliers[i]
            self.up_res.append(ResBlock(ch + chans[i], out, temb, cfg.groups))
            if ds in cfg.attn_resolutions:
                self.up_attn[str(i)] = SpatialTransformer(out, cfg.d_cond, cfg.heads, cfg.groups)
            ch = out
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
                ds //= 2

        self.norm_out = nn.GroupNorm(min(cfg.groups, ch), ch)
        self.conv_out = zero_module(nn.Conv2d(ch, cfg.c_latent, 3, padding=1))
        self.temporal = nn.ModuleDict()
        abar = NoiseSchedule.linear(cfg.T_max).alphas_cumprod
        self.register_buffer("abar_table", torch.from_numpy(np.concatenate([[1.0], abar])), persistent=False)

    # -- bookkeeping -------------------------------------------------------

    def spatial_block_keys(self) -> list[str]:
        keys = [f"down{k}" for k in self.down_attn] + ["mid"] + [f"up{k}" for k in self.up_attn]
        return keys

    @staticmethod
    def group_of(name: str) -> str:
        return "temporal" if name.startswith("temporal.") else "spatial"

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {}
        for name, p in self.named_parameters():
            groups.setdefault(self.group_of(name), []).append((name, p))
        return groups

    def _temporal(self, key: str, x, n: int):
        if self.mode == VIDEO3D:
            return self.temporal[key](x, n)
        return x

    # -- forward -----------------------------------------------------------

    def forward(self, z, t, source, cond):
        """z, source: ``(B, n, c, h, w)``; t: ``(B,)`` ints; cond: ``(B, n, m, d_cond)``."""
        cfg = self.config
        if z.ndim != 5 or source.shape != z.shape:
            raise ShapeError(f"latent {tuple(z.shape)} and source {tuple(source.shape)} must match as (B, n, c, h, w)")
        b, n, c, hh, ww = z.shape
        if c != cfg.c_latent:
            raise ShapeError(f"expected {cfg.c_latent} latent channels, got {c}")
        if cond.ndim != 4 or cond.shape[:2] != (b, n) or cond.shape[-1] != cfg.d_cond:
            raise ShapeError(f"condition shape {tuple(cond.shape)} incompatible with latent batch {(b, n)}")
        factor = 2 ** (len(cfg.channel_multipliers) - 1)
        if hh % factor or ww % factor:
            raise ShapeError(f"latent size {hh}x{ww} not divisible by {factor}")
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(b)
        if bool((t < 0).any()) or bool((t > cfg.T_max).any()):
            raise TimestepError(f"timestep outside [0, {cfg.T_max}]")

        emb = sinusoidal(t, cfg.base_width).to(z.dtype)
        emb = self.time_embed(emb).repeat_interleave(n, dim=0)
        ctx = cond.reshape(b * n, cond.shape[2], cond.shape[3])
        x = torch.cat([z, source], dim=2).reshape(b * n, 2 * c, hh, ww)

        h = self.conv_in(x)
        skips = []
        for i, res in enumerate(self.down_res):
            h = res(h, emb)
            if str(i) in self.down_attn:
                h = self.down_attn[str(i)](h, ctx)
                h = self._temporal(f"down{i}", h, n)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)

        h = self.mid_res1(h, emb)
        h = self.mid_attn(h, ctx)
        h = self._temporal("mid", h, n)
        h = self.mid_res2(h, emb)

        nlev = len(self.down_res)
        for j, res in enumerate(self.up_res):
            i = nlev - 1 - j
            h = res(torch.cat([h, skips.pop()], dim=1), emb)
            if str(i) in self.up_attn:
                h = self.up_attn[str(i)](h, ctx)
                h = self._temporal(f"up{i}", h, n)
            if i > 0:
                h = F.interpolate(h, scale_factor=2.0, mode="nearest")
                h = self.upsample[j](h)

        out = self.conv_out(F.silu(self.norm_out(h))).reshape(b, n, c, hh, ww)
        if cfg.output == "eps":
            return out
        abar = self.abar_table[t.long()].to(z.dtype).view(b, 1, 1, 1, 1)
        return abar.sqrt() * out + (1.0 - abar).sqrt() * z


def _block_width(model: DenoiserModel, key: str) -> int:
    cfg = model.config
    if key == "mid":
        return cfg.base_width * cfg.channel_multipliers[-1]
    level = int(key[len("down"):]) if key.startswith("down") else int(key[len("up"):])
    return cfg.base_width * cfg.channel_multipliers[level]


def inflate(model2d: DenoiserModel) -> DenoiserModel:
    """Copy a 2D model and insert one zero-initialised temporal block per spatial attention block."""
    if model2d.mode != IMAGE2D:
        raise AlreadyInflated("model is already in video3d mode")
    model = copy.deepcopy(model2d)
    ref = next(model.parameters())
    for key in model.spatial_block_keys():
        block = TemporalAttention(_block_width(model, key), model.config.heads)
        model.temporal[key] = block.to(dtype=ref.dtype, device=ref.device)
    model.mode = VIDEO3D
    return model


# -- latent volumes ---------------------------------------------------------


@dataclass
class LatentVolume:
    data: torch.Tensor  # (n, c, h, w)
    t: int

    def __post_init__(self):
        if not torch.isfinite(self.data).all():
            raise ValueError("latent contains non-finite values")


def predict_noise(model: DenoiserModel, z: LatentVolume, source_latent, cond) -> torch.Tensor:
    """Single-volume epsilon prediction, ``(n, c, h, w)``."""
    data = z.data
    source_latent = torch.as_tensor(source_latent, dtype=data.dtype)
    cond = torch.as_tensor(cond).to(data.dtype)
    if source_latent.shape != data.shape:
        raise ShapeError("source latent must match the noisy latent shape")
    if cond.ndim != 3 or cond.shape[0] != data.shape[0]:
        raise ShapeError(f"condition frames {tuple(cond.shape)} do not match {data.shape[0]} latent frames")
    if not 0 <= z.t <= model.config.T_max:
        raise TimestepError(f"timestep {z.t} outside [0, {model.config.T_max}]")
    t = torch.tensor([z.t])
    return model(data[None], t, source_latent[None], cond[None])[0]


# -- latent codecs ----------------------------------------------------------


class IdentityCodec:
    """Pixel-space 'latent': intensities mapped affinely from [0, 1] to [-1, 1]."""

    factor = 1

    def latent_channels(self, c: int) -> int:
        return c

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """``(..., C, H, W)`` pixels -> latents."""
        return frames * 2.0 - 1.0

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return ((latents + 1.0) / 2.0).clamp(0.0, 1.0)


class ConvAutoencoder(nn.Module):
    """Small frozen-at-use 2x conv autoencoder; optional replacement for the identity codec."""

    factor = 2

    def __init__(self, channels: int = 3, latent: int = 8, width: int = 32):
        super().__init__()
        self.latent = latent
        self.enc = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2.0, mode="nearest"),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, channels, 3, padding=1),
        )

    def latent_channels(self, c: int) -> int:
        return self.latent

    def _fold(self, x):
        lead = x.shape[:-3]
        return x.reshape(-1, *x.shape[-3:]), lead

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        x, lead = self._fold(frames * 2.0 - 1.0)
        z = self.enc(x)
        return z.reshape(*lead, *z.shape[1:])

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        x, lead = self._fold(latents)
        y = self.dec(x)
        return ((y.reshape(*lead, *y.shape[1:]) + 1.0) / 2.0).clamp(0.0, 1.0)

    def forward(self, frames):
        return self.decode(self.encode(frames))


def pretrain_autoencoder(ae: ConvAutoencoder, frames: torch.Tensor, steps: int = 1500, lr: float = 2e-3,
                         batch: int = 32, seed: int = 0) -> list[float]:
    """Fit the autoencoder on ``(N, C, H, W)`` frames, then freeze it."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    losses = []
    ae.train()
    for _ in range(steps):
        idx = torch.randint(0, frames.shape[0], (batch,), generator=gen)
        x = frames[idx]
        y = ae.dec(ae.enc(x * 2.0 - 1.0))
        loss = F.mse_loss(y, x * 2.0 - 1.0)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    return losses


IDENTITY = IdentityCodec()


def _check_divisible(h: int, w: int, codec) -> None:
    if h % codec.factor or w % codec.factor:
        raise ShapeError(f"frame size {h}x{w} not divisible by codec factor {codec.factor}")


def encode_latent(clip: VideoClip, codec=IDENTITY, dtype=torch.float32) -> torch.Tensor:
    _check_divisible(clip.H, clip.W, codec)
    frames = torch.from_numpy(np.ascontiguousarray(clip.frames.transpose(0, 3, 1, 2))).to(dtype)
    with torch.no_grad():
        return codec.encode(frames)


def decode_latent(lat: torch.Tensor, codec=IDENTITY, fps=8) -> VideoClip:
    with torch.no_grad():
        pix = codec.decode(lat).detach().to(torch.float64).numpy()
    return VideoClip(pix.transpose(0, 2, 3, 1), fps)
