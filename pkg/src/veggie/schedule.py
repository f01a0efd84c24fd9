"""DDPM noise schedule and forward (noising) process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import TimestepError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``betas[t-1]`` is beta_t for ``t = 1..T_max``; ``abar(0) == 1``."""

    betas: np.ndarray
    alphas_cumprod: np.ndarray

    @classmethod
    def linear(cls, T_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T_max, dtype=np.float64)
        return cls.from_betas(betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        return cls(betas, np.cumprod(1.0 - betas))

    @property
    def T_max(self) -> int:
        return len(self.betas)

    def abar(self, t):
        """alpha-bar at integer timestep(s) ``t`` in ``[0, T_max]``."""
        table = np.concatenate([[1.0], self.alphas_cumprod])
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.T_max):
            raise TimestepError(f"timestep outside [0, {self.T_max}]")
        return table[t_arr]

    def check_t(self, t) -> None:
        t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T_max):
            raise TimestepError(f"timestep must lie in [1, {self.T_max}]")


def _coef(schedule: NoiseSchedule, t, like: torch.Tensor):
    abar = schedule.abar(np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t))
    a = torch.as_tensor(np.sqrt(abar), dtype=like.dtype)
    s = torch.as_tensor(np.sqrt(1.0 - abar), dtype=like.dtype)
    if a.ndim == 1:
        shape = (-1,) + (1,) * (like.ndim - 1)
        a, s = a.view(shape), s.view(shape)
    return a, s


def add_noise(schedule: NoiseSchedule, z0, t, eps):
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``; ``t`` scalar or one per batch row."""
    schedule.check_t(t)
    if isinstance(z0, np.ndarray):
        abar = schedule.abar(t)
        return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps
    a, s = _coef(schedule, t, z0)
    return a * z0 + s * eps
