"""Comparison attacks: pixel-space PGD and a roadside adversarial patch."""
from __future__ import annotations

import logging
from typing import Optional

import numpy as np
import torch

from .attack import AttackConfig, AttackResult, attack_loss, select_target_queries
from .corpus.render import road_mask
from .errors import ConfigurationError, ContractViolation

log = logging.getLogger(__name__)

PATCH_SIZE = (60, 120)  # rows, columns
PATCH_VIEWS = ("CAM_FRONT", "CAM_BACK")


def _objective(victim, images, scene, cfg: AttackConfig, targets):
    pred = victim.predict(images, scene.cameras)
    if cfg.goal == "inject" and targets is None:
        targets = select_target_queries(pred, cfg.y_star, cfg.K_target)
    return attack_loss(pred, cfg, targets), targets, pred


def pixel_pgd(scene, victim, cfg: AttackConfig, epsilon: float = 0.1, iterations: int = 30,
              step: float = 0.01) -> AttackResult:
    """L-inf PGD directly on pixels against the same removal/injection objective."""
    if epsilon < 0 or step <= 0 or iterations < 0:
        raise ConfigurationError("need epsilon >= 0, step > 0, iterations >= 0")
    x = torch.from_numpy(np.asarray(scene.images)).to(victim.dtype)
    delta = torch.zeros_like(x)
    targets, history = None, []
    for k in range(iterations):
        d = delta.detach().requires_grad_(True)
        loss, targets, _ = _objective(victim, (x + d).clamp(0, 1), scene, cfg, targets)
        (grad,) = torch.autograd.grad(loss, d)
        history.append({"iteration": k, "attack": loss.item()})
        if not torch.isfinite(grad).all():
            log.warning("pixel_pgd: non-finite gradient at iteration %d, step skipped", k)
            continue
        delta = (delta - step * torch.sign(grad)).clamp(-epsilon, epsilon)
        delta = (x + delta).clamp(0, 1) - x
    adv = (x + delta).clamp(0, 1)
    if float((adv - x).abs().max()) > epsilon + 1e-6:
        raise ContractViolation("pixel PGD left the L-inf ball")
    with torch.no_grad():
        pred = victim.predict(adv, scene.cameras)
    record = {**cfg.to_record(), "pixel_epsilon": epsilon, "pixel_iterations": iterations, "pixel_step": step}
    return AttackResult(adv.detach().cpu().float().numpy(), pred.detach(), history, record, cfg.seed,
                        extra={"targets": targets, "scene_id": scene.scene_id}, method="pixel_pgd")


def largest_free_rectangle(free: np.ndarray) -> tuple[int, int, int, int]:
    """Largest all-True axis-aligned rectangle as (top, left, height, width); ties keep the first found."""
    H, W = free.shape
    heights = np.zeros(W, dtype=np.int64)
    best = (0, 0, 0, 0)
    best_area = 0
    for r in range(H):
        heights = np.where(free[r], heights + 1, 0)
        stack: list[int] = []
        for c in range(W + 1):
            h = heights[c] if c < W else 0
            start = c
            while stack and heights[stack[-1]] >= h:
                top = stack.pop()
                start = stack[-1] + 1 if stack else 0
                area = heights[top] * (c - start)
                if area > best_area:
                    best_area = int(area)
                    best = (r - int(heights[top]) + 1, start, int(heights[top]), c - start)
            stack.append(c)
    return best


def patch_placement(scene, view: int, size: tuple[int, int] = PATCH_SIZE) -> tuple[int, int]:
    """Top-left corner of a ``size`` patch centred in the view's largest non-road rectangle."""
    free = ~road_mask(scene.gt_layout, scene.cameras[view])
    top, left, h, w = largest_free_rectangle(free)
    ph, pw = size
    if h < ph or w < pw:
        raise ConfigurationError(
            f"no {ph}x{pw} non-road rectangle in view {scene.cameras[view].name} (largest {h}x{w})"
        )
    return top + (h - ph) // 2, left + (w - pw) // 2


def adv_patch(scene, victim, cfg: AttackConfig, size: tuple[int, int] = PATCH_SIZE, iterations: int = 30,
              step: float = 0.05, placements: Optional[dict[int, tuple[int, int]]] = None,
              views: tuple[str, ...] = PATCH_VIEWS) -> AttackResult:
    """Optimise unconstrained [0, 1] patches pasted off-road in the front and back views."""
    x = torch.from_numpy(np.asarray(scene.images)).to(victim.dtype)
    names = [c.name for c in scene.cameras]
    view_ids = [names.index(v) for v in views if v in names]
    ph, pw = size
    if placements is None:
        placements = {v: patch_placement(scene, v, size) for v in view_ids}
    mask = torch.zeros_like(x[:, :1])
    for v, (top, left) in placements.items():
        if top < 0 or left < 0 or top + ph > x.shape[-2] or left + pw > x.shape[-1]:
            raise ConfigurationError(f"patch in view {v} leaves the image")
        if road_mask(scene.gt_layout, scene.cameras[v])[top:top + ph, left:left + pw].any():
            raise ConfigurationError(f"patch in view {v} overlaps road pixels")
        mask[v, :, top:top + ph, left:left + pw] = 1.0
    g = torch.Generator().manual_seed(int(cfg.seed) + 104729)
    patch = torch.rand(x.shape, generator=g, dtype=torch.float64).to(x.dtype)
    targets, history = None, []
    for k in range(iterations):
        p = patch.detach().requires_grad_(True)
        loss, targets, _ = _objective(victim, x * (1 - mask) + p * mask, scene, cfg, targets)
        (grad,) = torch.autograd.grad(loss, p)
        history.append({"iteration": k, "attack": loss.item()})
        if torch.isfinite(grad).all():
            patch = (patch - step * torch.sign(grad)).clamp(0, 1)
    adv = (x * (1 - mask) + patch * mask).detach()
    with torch.no_grad():
        pred = victim.predict(adv, scene.cameras)
    record = {**cfg.to_record(), "patch_size": list(size), "patch_iterations": iterations, "patch_step": step}
    extra = {"placements": {names[v]: list(map(int, tl)) for v, tl in placements.items()},
             "targets": targets, "scene_id": scene.scene_id}
    return AttackResult(adv.cpu().float().numpy(), pred.detach(), history, record, cfg.seed,
                        extra=extra, method="adv_patch")
