"""Training loops for the toy generator."""
from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import TrainingFailure
from .generator import LatentGenerator

log = logging.getLogger(__name__)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a - b) ** 2).mean())
    return 99.0 if mse == 0 else 10.0 * math.log10(1.0 / mse)


def _check(loss: torch.Tensor, step: int, history: list[float]) -> None:
    if not torch.isfinite(loss):
        tail = ", ".join(f"{v:.4g}" for v in history[-5:])
        raise TrainingFailure(f"loss became non-finite at step {step}; last losses: [{tail}]")


def train_autoencoder(gen: LatentGenerator, images: torch.Tensor, steps: int = 3000, batch: int = 16,
                      crop: int = 64, lr: float = 2e-3, seed: int = 0) -> list[float]:
    """Fit the autoencoder on random crops of ``images`` (N, 3, H, W).

    Sets ``gen.latent_scale`` so that encoded latents have unit standard deviation.
    """
    ae = gen.autoencoder.train()
    for p in ae.parameters():
        p.requires_grad_(True)
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    N, _, H, W = images.shape
    history = []
    for step in range(steps):
        idx = torch.randint(0, N, (batch,), generator=g)
        if crop and crop < H:
            oy = torch.randint(0, (H - crop) // 8 + 1, (1,), generator=g).item() * 8
            ox = torch.randint(0, (W - crop) // 8 + 1, (1,), generator=g).item() * 8
            x = images[idx, :, oy:oy + crop, ox:ox + crop]
        else:
            x = images[idx]
        z = ae.encoder(x)
        rec = ae.decoder(z)
        loss = F.mse_loss(rec, x) + 0.5 * F.l1_loss(rec, x) + 1e-4 * z.pow(2).mean()
        _check(loss, step, history)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
        if step % 250 == 0:
            log.info("autoencoder step %d loss %.5f", step, history[-1])
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        z = torch.cat([ae.encoder(images[i:i + 32]) for i in range(0, min(N, 256), 32)])
    gen.latent_scale = float(1.0 / z.std())
    return history


def reconstruction_psnr(gen: LatentGenerator, images: torch.Tensor) -> float:
    with torch.no_grad():
        vals = [psnr(gen.decode(gen.encode(images[i:i + 1])), images[i:i + 1]) for i in range(len(images))]
    return float(np.mean(vals))


def train_denoiser(gen: LatentGenerator, latents: torch.Tensor, controls: torch.Tensor,
                   prompts: list[str], steps: int = 3000, batch: int = 32, lr: float = 1e-3,
                   uncond_prob: float = 0.1, seed: int = 0) -> list[float]:
    """Noise-prediction training of the denoiser and prompt encoder.

    ``latents`` (N, C, h, w) are already scaled; ``controls`` (N, 3, H, W) are the
    matching per-view layout projections and ``prompts`` the per-view captions.
    Conditioning is dropped with probability ``uncond_prob`` for guidance.
    """
    den = gen.denoiser.train()
    text = gen.text_encoder.train()
    params = list(den.parameters()) + list(text.parameters())
    for p in params:
        p.requires_grad_(True)
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    abar = torch.tensor(gen.schedule.alpha_bars, dtype=latents.dtype)
    pooled = F.adaptive_avg_pool2d(controls, latents.shape[-2:])
    unique = sorted(set(prompts))
    prompt_idx = torch.tensor([unique.index(p) for p in prompts])
    N = len(latents)
    history = []
    for step in range(steps):
        idx = torch.randint(0, N, (batch,), generator=g)
        t = torch.randint(1, gen.schedule.T + 1, (batch,), generator=g)
        noise = torch.randn(latents[idx].shape, generator=g, dtype=latents.dtype)
        a = abar[t][:, None, None, None]
        zt = a.sqrt() * latents[idx] + (1 - a).sqrt() * noise
        emb = text(unique)[prompt_idx[idx]]
        keep = (torch.rand(batch, generator=g) >= uncond_prob).to(latents.dtype)
        ctrl = pooled[idx] * keep[:, None, None, None]
        emb = emb * keep[:, None]
        pred = den(zt, t, ctrl, emb)
        loss = F.mse_loss(pred, noise)
        _check(loss, step, history)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
        if step % 250 == 0:
            log.info("denoiser step %d loss %.5f", step, history[-1])
    den.eval()
    text.eval()
    for p in params:
        p.requires_grad_(False)
    return history
