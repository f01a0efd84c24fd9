"""Conditioner + denoiser bundle and the checkpoint archive format.

Checkpoint layout (zip, format tag ``veggie-ckpt/1``)::

    header.json            configs, denoiser mode, LoRA config, stage, extras
    arrays/<name>.npy      one entry per named parameter/buffer

Entries are written in sorted order with fixed timestamps so identical
weights always produce byte-identical archives.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioner import Conditioner, ConditionerConfig, LoraConfig
from .diffusion import IMAGE2D, VIDEO3D, DenoiserModel, UNetConfig, inflate
from .errors import CheckpointError
from .schedule import NoiseSchedule

CKPT_FORMAT = "veggie-ckpt/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)

# "desk" fits the toy curriculum into a single-CPU time budget
PRESETS: dict[str, tuple[ConditionerConfig, UNetConfig]] = {
    "default": (ConditionerConfig(), UNetConfig()),
    "desk": (
        ConditionerConfig(d_model=128, d_cond=64, layers=2, heads=4, m=32),
        UNetConfig(base_width=32, channel_multipliers=(1, 2, 2), d_cond=64),
    ),
}


class VeggieModel(nn.Module):
    def __init__(self, conditioner: Conditioner, denoiser: DenoiserModel, stage: int = 0):
        super().__init__()
        if conditioner.config.d_cond != denoiser.config.d_cond:
            raise ValueError("conditioner d_cond must equal denoiser d_cond")
        self.conditioner = conditioner
        self.denoiser = denoiser
        self.stage = stage

    @classmethod
    def create(cls, cond_cfg: ConditionerConfig | None = None, unet_cfg: UNetConfig | None = None,
               seed: int = 0) -> "VeggieModel":
        torch.manual_seed(seed)
        return cls(Conditioner(cond_cfg), DenoiserModel(unet_cfg))

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.denoiser.config.T_max)

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out = {}
        for g, items in self.conditioner.param_groups().items():
            out[f"conditioner.{g}"] = [(f"conditioner.{n}", p) for n, p in items]
        for g, items in self.denoiser.param_groups().items():
            out[f"unet.{g}"] = [(f"denoiser.{n}", p) for n, p in items]
        return out

    def to_video(self, lora: LoraConfig | None = None) -> None:
        """Stage-2 preparation: inflate the UNet and adapt the conditioner with LoRA."""
        if self.denoiser.mode == IMAGE2D:
            self.denoiser = inflate(self.denoiser)
        if not self.conditioner.adapted:
            self.conditioner.apply_lora(lora or LoraConfig())


def params_digest(named) -> str:
    h = hashlib.sha256()
    for name, p in sorted(named, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(model: VeggieModel, path, extra: dict | None = None) -> None:
    header = {
        "format": CKPT_FORMAT,
        "conditioner_config": model.conditioner.config.to_json(),
        "unet_config": model.denoiser.config.to_json(),
        "mode": model.denoiser.mode,
        "adapted": model.conditioner.adapted,
        "stage": model.stage,
        "extra": extra or {},
    }
    state = {f"conditioner.{k}": v for k, v in model.conditioner.state_dict().items()}
    state.update({f"denoiser.{k}": v for k, v in model.denoiser.state_dict().items()})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name in sorted(state):
            buf = io.BytesIO()
            np.save(buf, state[name].detach().cpu().numpy(), allow_pickle=False)
            _write_entry(zf, f"arrays/{name}.npy", buf.getvalue())


def read_header(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    return header


def load_checkpoint(path) -> VeggieModel:
    header = read_header(path)
    ccfg = dict(header["conditioner_config"])
    lora = ccfg.pop("lora", None)
    cond = Conditioner(ConditionerConfig(**ccfg))
    if header.get("adapted"):
        cond.apply_lora(LoraConfig(**lora) if lora else None)
    ucfg = UNetConfig(**header["unet_config"])
    den = DenoiserModel(ucfg)
    if header["mode"] == VIDEO3D:
        den = inflate(den)
    with zipfile.ZipFile(path) as zf:
        arrays = {
            name[len("arrays/"):-len(".npy")]: np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            for name in zf.namelist() if name.startswith("arrays/")
        }

    def sub(prefix):
        return {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    try:
        cond.load_state_dict(sub("conditioner."))
        den.load_state_dict(sub("denoiser."))
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match its header: {exc}") from exc
    return VeggieModel(cond, den, stage=header.get("stage", 0))
