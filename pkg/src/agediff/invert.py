"""Deterministic inversion of a real image into the model's latent trajectory.

Two stages: (1) reverse the deterministic sampler at guidance 1 to get a
latent trajectory ending in z_T, then (2) walk back down from z_T at the
editing guidance weight, optimizing the unconditional ("null") text
embedding at every step so the guided trajectory lands on the recorded one.
Sampling with the source prompt and the optimized nulls then reconstructs
the input image.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import sched
from .errors import TrainingDivergedError, ValidationError


@dataclass
class InversionResult:
    """Everything needed to reproduce (and then edit) one input image."""

    z_T: torch.Tensor
    trajectory: list[torch.Tensor]  # latents z*_t, ascending t order; last is z_T
    null_embeddings: list[torch.Tensor]  # per denoising step, descending t order
    source_prompt: str
    source_latent: torch.Tensor  # encoded input, the final reconstruction target
    steps: int
    guidance: float
    per_step_losses: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.trajectory) != self.steps or len(self.null_embeddings) != self.steps:
            raise ValidationError(
                f"trajectory ({len(self.trajectory)}) and null embeddings "
                f"({len(self.null_embeddings)}) must both have {self.steps} entries"
            )


def ddim_invert(image, prompt: str, backend, steps: int) -> list[torch.Tensor]:
    """Reverse-of-sampling trajectory at guidance 1.

    Returns ``[z_0, z_t1, ..., z_T]`` (length steps + 1) where z_0 is the
    encoded input image and the ascending timesteps mirror the sampler grid.
    """
    schedule = backend.schedule
    timesteps = sched.inference_timesteps(schedule, steps)  # descending
    spacing = sched.timestep_spacing(schedule, steps)
    cond = backend.text_embed(prompt)
    with torch.no_grad():
        latent = backend.encode_image(image)
        out = [latent]
        for t in reversed(timesteps):  # ascending
            noise_pred = backend.predict_noise(latent, t, cond)
            latent = sched.renoise_step(schedule, noise_pred, t - spacing, t, latent)
            out.append(latent)
    return out


def guided_noise(backend, latent, t, cond, uncond, guidance: float) -> torch.Tensor:
    """Classifier-free-guided noise prediction (two forward passes)."""
    eps_uncond = backend.predict_noise(latent, t, uncond)
    eps_cond = backend.predict_noise(latent, t, cond)
    return eps_uncond + guidance * (eps_cond - eps_uncond)


def optimize_null_text(
    trajectory: list[torch.Tensor],
    prompt: str,
    backend,
    inner_steps: int = 10,
    inner_lr: float = 1.0e-2,
    guidance: float = 7.5,
    early_stop: float = 1.0e-5,
) -> InversionResult:
    """Optimize one null embedding per timestep, top of the trajectory down.

    At each step the guided DDIM update is pushed toward the recorded
    trajectory latent by gradient descent on the unconditional embedding;
    optimization stops early once the squared distance drops below
    ``early_stop``.  With guidance 1 the objective does not depend on the
    null embedding, so the embeddings come back unchanged.
    """
    if len(trajectory) < 2:
        raise ValidationError("trajectory must contain at least [z_0, z_T]")
    steps = len(trajectory) - 1
    schedule = backend.schedule
    timesteps = sched.inference_timesteps(schedule, steps)
    spacing = sched.timestep_spacing(schedule, steps)

    cond = backend.text_embed(prompt)
    uncond = backend.text_embed("")

    null_embeddings: list[torch.Tensor] = []
    per_step_losses: list[list[float]] = []
    latent = trajectory[-1].detach()

    for i, t in enumerate(timesteps):
        target = trajectory[len(trajectory) - i - 2].detach()
        with torch.no_grad():
            eps_cond = backend.predict_noise(latent, t, cond)
        null = uncond.detach().clone().requires_grad_(True)
        optimizer = torch.optim.Adam([null], lr=inner_lr)
        losses: list[float] = []
        for _ in range(max(inner_steps, 0)):
            eps_uncond = backend.predict_noise(latent, t, null)
            eps = eps_uncond + guidance * (eps_cond - eps_uncond)
            prev = sched.denoise_step(schedule, eps, t, t - spacing, latent)
            loss = torch.nn.functional.mse_loss(prev, target)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingDivergedError(i, "non-finite null-text loss")
            losses.append(value)
            if value < early_stop:
                break
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        null_embeddings.append(null.detach())
        per_step_losses.append(losses)
        with torch.no_grad():
            eps = guided_noise(backend, latent, t, cond, null.detach(), guidance)
            latent = sched.denoise_step(schedule, eps, t, t - spacing, latent)

    return InversionResult(
        z_T=trajectory[-1].detach(),
        trajectory=[z.detach() for z in trajectory[1:]],
        null_embeddings=null_embeddings,
        source_prompt=prompt,
        source_latent=trajectory[0].detach(),
        steps=steps,
        guidance=guidance,
        per_step_losses=per_step_losses,
    )


def default_null_result(trajectory: list[torch.Tensor], prompt: str, backend,
                        guidance: float) -> InversionResult:
    """An InversionResult whose nulls are the plain empty-prompt embedding."""
    steps = len(trajectory) - 1
    uncond = backend.text_embed("").detach()
    return InversionResult(
        z_T=trajectory[-1].detach(),
        trajectory=[z.detach() for z in trajectory[1:]],
        null_embeddings=[uncond.clone() for _ in range(steps)],
        source_prompt=prompt,
        source_latent=trajectory[0].detach(),
        steps=steps,
        guidance=guidance,
    )


def sample_with_nulls(
    backend,
    z_T: torch.Tensor,
    prompt: str,
    null_embeddings: list[torch.Tensor],
    guidance: float,
    controller=None,
    pass_role: Optional[str] = None,
) -> torch.Tensor:
    """Run the deterministic sampler from ``z_T`` with per-step null embeddings.

    When a controller is given, it is installed for the conditional forward
    pass only; ``pass_role`` tells it whether this trajectory is the edit
    source or target.
    """
    schedule = backend.schedule
    steps = len(null_embeddings)
    timesteps = sched.inference_timesteps(schedule, steps)
    spacing = sched.timestep_spacing(schedule, steps)
    cond = backend.text_embed(prompt)
    latent = z_T
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            if controller is not None:
                controller.begin_step(i)
            eps_uncond = backend.predict_noise(latent, t, null_embeddings[i])
            if controller is not None:
                controller.set_pass(pass_role)
                backend.set_attention_controller(controller)
            try:
                eps_cond = backend.predict_noise(latent, t, cond)
            finally:
                if controller is not None:
                    backend.clear_attention_controller()
                    controller.set_pass(None)
            eps = eps_uncond + guidance * (eps_cond - eps_uncond)
            latent = sched.denoise_step(schedule, eps, t, t - spacing, latent)
    return latent


def reconstruct(inversion: InversionResult, backend) -> torch.Tensor:
    """Decode the sampler's output for the source prompt and optimized nulls."""
    final = sample_with_nulls(
        backend,
        inversion.z_T,
        inversion.source_prompt,
        inversion.null_embeddings,
        inversion.guidance,
    )
    return backend.decode_latent(final)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_inversion(result: InversionResult, out_dir: str | Path, config_hash: str = "") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "z_T.npy", result.z_T.numpy())
    np.save(out / "source_latent.npy", result.source_latent.numpy())
    for i, z in enumerate(result.trajectory):
        np.save(out / f"trajectory_{i:04d}.npy", z.numpy())
    for i, u in enumerate(result.null_embeddings):
        np.save(out / f"null_{i:04d}.npy", u.numpy())
    meta = {
        "prompt": result.source_prompt,
        "steps": result.steps,
        "guidance": result.guidance,
        "config_hash": config_hash,
        "per_step_losses": result.per_step_losses,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return out


def load_inversion(in_dir: str | Path) -> InversionResult:
    src = Path(in_dir)
    meta = json.loads((src / "metadata.json").read_text(encoding="utf-8"))
    steps = meta["steps"]
    trajectory = [torch.from_numpy(np.load(src / f"trajectory_{i:04d}.npy")) for i in range(steps)]
    nulls = [torch.from_numpy(np.load(src / f"null_{i:04d}.npy")) for i in range(steps)]
    return InversionResult(
        z_T=torch.from_numpy(np.load(src / "z_T.npy")),
        trajectory=trajectory,
        null_embeddings=nulls,
        source_prompt=meta["prompt"],
        source_latent=torch.from_numpy(np.load(src / "source_latent.npy")),
        steps=steps,
        guidance=meta["guidance"],
        per_step_losses=meta.get("per_step_losses", []),
    )
