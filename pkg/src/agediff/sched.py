"""Deterministic DDIM schedule arithmetic.

One place owns the noise schedule and the two step directions (denoise one
step, re-noise one step) so training, inversion, and editing all agree on
the exact recursion.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative signal levels of a variance-preserving noise schedule."""

    alphas_cumprod: torch.Tensor  # shape (num_train_timesteps,)
    num_train_timesteps: int

    @property
    def final_alpha_cumprod(self) -> torch.Tensor:
        # Signal level "below" the first trained timestep; stepping to t < 0
        # lands here, i.e. on (almost) clean data.
        return self.alphas_cumprod[0]

    def alpha_bar(self, t: int) -> torch.Tensor:
        if t < 0:
            return self.final_alpha_cumprod
        return self.alphas_cumprod[t]


def linear_schedule(
    num_train_timesteps: int = 1000,
    beta_start: float = 1.0e-4,
    beta_end: float = 2.0e-2,
) -> DiffusionSchedule:
    betas = torch.linspace(beta_start, beta_end, num_train_timesteps, dtype=torch.float32)
    alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
    return DiffusionSchedule(alphas_cumprod=alphas_cumprod, num_train_timesteps=num_train_timesteps)


def inference_timesteps(schedule: DiffusionSchedule, steps: int) -> list[int]:
    """Descending timestep grid for ``steps`` denoising steps.

    Evenly strided with a +1 offset so the last step ends just above clean
    data, matching the common latent-diffusion convention.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > schedule.num_train_timesteps:
        raise ValueError(
            f"steps ({steps}) exceeds trained timesteps ({schedule.num_train_timesteps})"
        )
    ratio = schedule.num_train_timesteps // steps
    offset = 1 if ratio > 1 else 0  # offset would duplicate/overflow at full density
    ts = [i * ratio + offset for i in range(steps)]
    ts[-1] = min(ts[-1], schedule.num_train_timesteps - 1)
    return ts[::-1]


def timestep_spacing(schedule: DiffusionSchedule, steps: int) -> int:
    return schedule.num_train_timesteps // steps


def denoise_step(
    schedule: DiffusionSchedule,
    noise_pred: torch.Tensor,
    t: int,
    t_prev: int,
    sample: torch.Tensor,
) -> torch.Tensor:
    """One deterministic DDIM step from timestep ``t`` down to ``t_prev``."""
    a_t = schedule.alpha_bar(t)
    a_prev = schedule.alpha_bar(t_prev)
    x0 = (sample - (1.0 - a_t).sqrt() * noise_pred) / a_t.sqrt()
    return a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * noise_pred


def renoise_step(
    schedule: DiffusionSchedule,
    noise_pred: torch.Tensor,
    t_cur: int,
    t_next: int,
    sample: torch.Tensor,
) -> torch.Tensor:
    """One deterministic inversion step from timestep ``t_cur`` up to ``t_next``.

    ``t_cur`` may be negative, meaning the sample sits at (almost) clean data.
    """
    a_cur = schedule.alpha_bar(t_cur)
    a_next = schedule.alpha_bar(t_next)
    x0 = (sample - (1.0 - a_cur).sqrt() * noise_pred) / a_cur.sqrt()
    return a_next.sqrt() * x0 + (1.0 - a_next).sqrt() * noise_pred


def add_noise(
    schedule: DiffusionSchedule,
    clean: torch.Tensor,
    noise: torch.Tensor,
    t: torch.Tensor,
) -> torch.Tensor:
    """Forward-process sample: sqrt(a_t) * clean + sqrt(1 - a_t) * noise.

    ``t`` is a per-sample integer tensor.
    """
    a = schedule.alphas_cumprod.to(clean.dtype)[t].view(-1, *([1] * (clean.dim() - 1)))
    return a.sqrt() * clean + (1.0 - a).sqrt() * noise


def predict_clean(
    schedule: DiffusionSchedule,
    noisy: torch.Tensor,
    noise_pred: torch.Tensor,
    t: torch.Tensor,
) -> torch.Tensor:
    """One-step estimate of the clean sample from a noise prediction."""
    a = schedule.alphas_cumprod.to(noisy.dtype)[t].view(-1, *([1] * (noisy.dim() - 1)))
    return (noisy - (1.0 - a).sqrt() * noise_pred) / a.sqrt()
