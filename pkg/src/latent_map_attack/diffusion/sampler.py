"""Fixed-noise partial forward diffusion and deterministic DDIM denoising."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch.utils.checkpoint import checkpoint as _checkpoint

from ..errors import ContractViolation, NumericalFailure
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


@dataclass
class ConditioningBundle:
    """Shared conditioning for every view of one scene.

    ``control`` is the per-view projection of ``bev_layout`` (V, 3, H, W);
    it is derived once and never perturbed, so the road topology seen by the
    denoiser is identical before and after the attack.
    """

    prompt_embedding: torch.Tensor
    bev_layout: list
    camera_params: list
    guidance_scale: float = 2.0
    control: Optional[torch.Tensor] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ContractViolation("guidance_scale must be nonnegative")
        if self.control is not None and self.control.shape[0] != len(self.camera_params):
            raise ContractViolation(
                f"{self.control.shape[0]} control maps for {len(self.camera_params)} cameras"
            )


# eps_theta(z_t, t, conditioning or None) -> predicted noise, same shape as z_t
Denoiser = Callable[[torch.Tensor, int, Optional[ConditioningBundle]], torch.Tensor]


def forward_noise(z0: torch.Tensor, delta: torch.Tensor, t_star: int,
                  fixed_noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(abar) * (z0 + delta) + sqrt(1 - abar) * noise at level ``t_star``."""
    if z0.shape != delta.shape or z0.shape != fixed_noise.shape:
        raise ContractViolation(
            f"shape mismatch: z0 {tuple(z0.shape)}, delta {tuple(delta.shape)}, noise {tuple(fixed_noise.shape)}"
        )
    abar = schedule.alpha_bar(t_star)
    return math.sqrt(abar) * (z0 + delta) + math.sqrt(1.0 - abar) * fixed_noise


def guided_noise(z: torch.Tensor, t: int, cond: Optional[ConditioningBundle],
                 denoiser: Denoiser) -> torch.Tensor:
    """Noise prediction with classifier-free guidance.

    The unconditional pass runs without gradient tracking; a guidance scale
    of 1 (or no conditioning) skips it entirely.
    """
    if cond is None:
        return denoiser(z, t, None)
    eps_c = denoiser(z, t, cond)
    g = cond.guidance_scale
    if g == 1.0:
        return eps_c
    with torch.no_grad():
        eps_u = denoiser(z, t, None)
    return eps_u + g * (eps_c - eps_u)


def ddim_step(z: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t - 1)
    z0_hat = (z - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)
    return math.sqrt(abar_prev) * z0_hat + math.sqrt(1.0 - abar_prev) * eps


def ddim_denoise(z_noisy: torch.Tensor, t_star: int, conditioning: Optional[ConditioningBundle],
                 denoiser: Denoiser, schedule: NoiseSchedule, use_checkpoint: bool = False) -> torch.Tensor:
    """Run the deterministic DDIM update for t = t_star .. 1 (eta = 0).

    With ``use_checkpoint`` each step's activations are recomputed during the
    backward pass instead of stored.
    """
    if not 0 <= t_star <= schedule.T:
        raise ContractViolation(f"t_star {t_star} outside [0, {schedule.T}]")
    z = z_noisy
    for t in range(t_star, 0, -1):

        def step(z_in, t=t):
            eps = guided_noise(z_in, t, conditioning, denoiser)
            if not torch.isfinite(eps).all():
                raise NumericalFailure(f"non-finite denoiser output at t={t}")
            return ddim_step(z_in, t, eps, schedule)

        if use_checkpoint and z.requires_grad:
            z = _checkpoint(step, z, use_reentrant=False)
        else:
            z = step(z)
    return z
