"""Discrete DDPM noise schedule, forward noising, and the Euler sampler with
classifier-free guidance.

Sampler conventions (the "scaled" parameterisation used by Euler-discrete
schedulers): for a schedule point ``t`` with ``sigma = sqrt((1 - abar) / abar)``
the sampler state is ``x = z_t / sqrt(abar)``, i.e. ``x = x0 + sigma * eps``.
The model sees ``z_t = x / sqrt(sigma**2 + 1)`` and predicts ``eps``; then

    x0_hat = x - sigma * eps_hat
    d      = (x - x0_hat) / sigma = eps_hat
    x     <- x + (sigma_next - sigma) * d
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    sigmas: torch.Tensor


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    cfg_scale: float = 3.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start < beta_end < 1:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    sigmas = torch.sqrt((1.0 - alpha_bars) / alpha_bars)
    return DiffusionSchedule(T, betas, alphas, alpha_bars, sigmas)


def _check_t(t: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.T):
        raise ValueError(f"timestep out of range [0, {schedule.T})")
    return t


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t = _check_t(t, schedule)
    abar = schedule.alpha_bars[t].to(x0.dtype)
    if abar.ndim:
        abar = abar.reshape(-1, *([1] * (x0.ndim - 1)))
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("unconditional and conditional predictions differ in shape")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def sampling_timesteps(schedule: DiffusionSchedule, steps: int) -> list[int]:
    """Evenly spaced timestep indices from T-1 down to 0."""
    if not 1 <= steps <= schedule.T:
        raise ValueError(f"steps must lie in [1, {schedule.T}]")
    if steps == 1:
        return [schedule.T - 1]
    grid = torch.linspace(schedule.T - 1, 0, steps, dtype=torch.float64)
    return [int(round(v)) for v in grid.tolist()]


def sigma_ladder(schedule: DiffusionSchedule, steps: int) -> tuple[list[int], list[float]]:
    """Timestep indices and the matching descending sigmas, with a trailing 0."""
    ts = sampling_timesteps(schedule, steps)
    sigmas = [float(schedule.sigmas[t]) for t in ts] + [0.0]
    return ts, sigmas


class SamplingError(RuntimeError):
    pass


@torch.no_grad()
def euler_sample(
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    cfg: SamplerConfig,
    ctx: torch.Tensor,
    null_ctx: torch.Tensor,
    shape: tuple[int, ...],
    dtype: torch.dtype = torch.float32,
    clamp: bool = True,
) -> torch.Tensor:
    """Deterministic Euler sampling along the schedule's sigma ladder.

    ``denoiser(z_t, t, ctx)`` returns predicted noise for a batch. When
    ``cfg.cfg_scale == 1`` the unconditional pass is skipped.
    """
    ts, sigmas = sigma_ladder(schedule, cfg.steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype) * sigmas[0]
    for i, t in enumerate(ts):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        x_in = x / math.sqrt(sigma**2 + 1.0)
        t_batch = torch.full((shape[0],), t, dtype=torch.long)
        eps_c = denoiser(x_in, t_batch, ctx)
        if cfg.cfg_scale == 1.0:
            eps = eps_c
        else:
            eps = cfg_combine(denoiser(x_in, t_batch, null_ctx), eps_c, cfg.cfg_scale)
        x0_hat = x - sigma * eps
        d = (x - x0_hat) / sigma
        x = x + (sigma_next - sigma) * d
        if not torch.isfinite(x).all():
            raise SamplingError(f"non-finite sample at step {i}")
    return x.clamp(-1.0, 1.0) if clamp else x
