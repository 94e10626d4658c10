"""Embedding-space direction loss with a negative anchor, and the toy image/text encoders."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion.networks import VOCABULARY, TextEncoder
from .errors import ConfigurationError, ContractViolation, TrainingFailure

log = logging.getLogger(__name__)

FORMAT = "lma-guidance-v1"
SHADOW_PROMPT = "a road with shadows"
WET_PROMPT = "a wet road surface"
NEGATIVE_ANCHOR = "distorted cars, warped buildings, unnatural sky"
DEGENERATE_NORM = 1e-8


@dataclass(frozen=True)
class GuidancePrompts:
    target: str = SHADOW_PROMPT
    negative_anchor: str = NEGATIVE_ANCHOR
    lambda_neg: float = 0.5

    def __post_init__(self):
        if not self.target.strip() or not self.negative_anchor.strip():
            raise ConfigurationError("guidance prompts must be non-empty")
        if self.lambda_neg < 0:
            raise ConfigurationError("lambda_neg must be nonnegative")


class VisionEncoder(nn.Module):
    def __init__(self, dim: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 48, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(48, 64, 3, stride=2, padding=1), nn.ReLU(),
        )
        # pooled statistics of the top and bottom halves keep sky/road apart
        self.proj = nn.Linear(2 * 64, dim)
        self.dim = dim

    def forward(self, x):
        h = self.net(x)
        half = h.shape[-2] // 2
        pooled = torch.cat([h[..., :half, :].mean((-1, -2)), h[..., half:, :].mean((-1, -2))], dim=1)
        return self.proj(pooled)


class EmbeddingPair:
    """Jointly trained image and text encoders sharing one embedding space.

    Both outputs are L2-normalised, as in contrastive image-text models.
    """

    def __init__(self, vision: VisionEncoder, text: TextEncoder, info: dict | None = None):
        if vision.dim != text.dim:
            raise ContractViolation(f"embedding dims differ: {vision.dim} vs {text.dim}")
        self.vision = vision.eval()
        self.text = text.eval()
        for p in list(vision.parameters()) + list(text.parameters()):
            p.requires_grad_(False)
        self.info = dict(info or {})

    @property
    def dim(self) -> int:
        return self.vision.dim

    @property
    def dtype(self) -> torch.dtype:
        return self.vision.proj.weight.dtype

    def to(self, dtype: torch.dtype) -> "EmbeddingPair":
        self.vision.to(dtype)
        self.text.to(dtype)
        return self

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.vision(images.to(self.dtype)), dim=-1)

    def encode_text(self, texts) -> torch.Tensor:
        with torch.no_grad():
            return F.normalize(self.text(texts), dim=-1)

    def manifest(self) -> dict:
        return {
            "format": FORMAT,
            "encoder": "toy contrastive CNN + bag-of-words",
            "dim": self.dim,
            "vocabulary": self.text.vocabulary,
            **self.info,
        }

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save({"vision": self.vision.state_dict(), "text": self.text.state_dict()}, d / "guidance.pt")
        (d / "guidance.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "EmbeddingPair":
        d = Path(directory)
        manifest = json.loads((d / "guidance.json").read_text())
        if manifest.get("format") != FORMAT:
            raise ContractViolation(f"unexpected guidance format {manifest.get('format')!r}")
        vision, text = VisionEncoder(manifest["dim"]), TextEncoder(manifest["dim"], manifest["vocabulary"])
        state = torch.load(d / "guidance.pt", map_location="cpu", weights_only=True)
        vision.load_state_dict(state["vision"])
        text.load_state_dict(state["text"])
        info = {k: v for k, v in manifest.items() if k not in ("format", "encoder", "dim", "vocabulary")}
        return cls(vision, text, info)


def direction_terms(d_img: torch.Tensor, d_target: torch.Tensor, n: torch.Tensor,
                    lambda_neg: float) -> torch.Tensor:
    """Per-row loss 1 - cos(d_img, d_target) + lambda_neg * relu(cos(d_img, n)).

    Rows with ``|d_img| < 1e-8`` contribute exactly 0, with a finite gradient.
    """
    sq = (d_img * d_img).sum(-1)
    norm = sq.clamp_min(DEGENERATE_NORM ** 2).sqrt()
    unit = d_img / norm[..., None]
    cos_t = (unit * F.normalize(d_target, dim=-1)).sum(-1)
    cos_n = (unit * F.normalize(n, dim=-1)).sum(-1)
    loss = 1.0 - cos_t + lambda_neg * F.relu(cos_n)
    return torch.where(sq < DEGENERATE_NORM ** 2, torch.zeros_like(loss), loss)


def direction_loss(x_gt: torch.Tensor, x_adv: torch.Tensor, prompts: GuidancePrompts,
                   enc: EmbeddingPair) -> torch.Tensor:
    """Mean over views of the direction loss between clean and edited images."""
    with torch.no_grad():
        e_gt = enc.encode_image(x_gt)
    d_img = enc.encode_image(x_adv) - e_gt
    d_target = enc.encode_text(prompts.target).to(d_img.dtype)
    n = enc.encode_text(prompts.negative_anchor).to(d_img.dtype)
    return direction_terms(d_img, d_target, n, prompts.lambda_neg).mean()


def total_loss(attack_loss, clip_loss, lambda_clip: float):
    return attack_loss + lambda_clip * clip_loss


# -- toy training ------------------------------------------------------------


def distort(images: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    """Corrupt the above-horizon half: channel swaps, warps and blotches."""
    out = images.clone()
    B, _, H, W = images.shape
    top = H // 2
    for b in range(B):
        kind = int(torch.randint(0, 3, (1,), generator=g))
        region = out[b, :, :top]
        if kind == 0:
            region = region[torch.randperm(3, generator=g)] * 1.4
        elif kind == 1:
            rows = torch.arange(top, dtype=torch.float32)
            shift = (6 * torch.sin(rows / 3.0 + float(torch.rand(1, generator=g)) * 6)).long()
            region = torch.stack([torch.roll(region[:, r], int(shift[r]), dims=-1) for r in range(top)], dim=1)
        else:
            blot = torch.rand(3, top // 8, W // 8, generator=g)
            region = 0.5 * region + 0.5 * F.interpolate(blot[None], size=(top, W), mode="nearest")[0]
        out[b, :, :top] = region.clamp(0, 1)
    return out


def attribute_caption(app: dict, distorted: bool = False) -> str:
    parts = [SHADOW_PROMPT if app["shadows"] else "a clean road"]
    parts.append(WET_PROMPT if app["wet"] else "a dry road surface")
    if distorted:
        parts.append(NEGATIVE_ANCHOR)
    return ", ".join(parts)


def train_embedding_pair(images: torch.Tensor, appearances: list[dict], steps: int = 1500,
                         batch: int = 32, dim: int = 32, lr: float = 2e-3, temperature: float = 0.1,
                         distort_prob: float = 0.3, seed: int = 0) -> tuple[EmbeddingPair, list[float]]:
    """Contrastive training on single views (N, 3, H, W) with attribute captions.

    Images sharing a caption are all positives for that caption (soft InfoNCE targets).
    """
    torch.manual_seed(seed)
    vision, text = VisionEncoder(dim), TextEncoder(dim, VOCABULARY)
    params = list(vision.parameters()) + list(text.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    g = torch.Generator().manual_seed(seed)
    history: list[float] = []
    for step in range(steps):
        idx = torch.randint(0, len(images), (batch,), generator=g)
        x = images[idx]
        flags = (torch.rand(batch, generator=g) < distort_prob).tolist()
        if any(flags):
            mask = torch.tensor(flags)
            x = x.clone()
            x[mask] = distort(x[mask], g)
        captions = [attribute_caption(appearances[i], f) for i, f in zip(idx.tolist(), flags)]
        unique = sorted(set(captions))
        cap_idx = torch.tensor([unique.index(c) for c in captions])
        zi = F.normalize(vision(x), dim=-1)
        zt = F.normalize(text(unique), dim=-1)
        logits = zi @ zt.T / temperature
        loss_i = F.cross_entropy(logits, cap_idx)
        # text -> image direction: uniform over the images carrying each caption
        tgt = (cap_idx[None] == torch.arange(len(unique))[:, None]).float()
        tgt = tgt / tgt.sum(1, keepdim=True)
        loss_t = -(tgt * F.log_softmax(logits.T, dim=1)).sum(1).mean()
        loss = 0.5 * (loss_i + loss_t)
        if not torch.isfinite(loss):
            raise TrainingFailure(f"guidance loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if step % 250 == 0:
            log.info("guidance step %d loss %.4f", step, history[-1])
    pair = EmbeddingPair(vision, text, {"train_steps": steps, "temperature": temperature,
                                        "final_loss": float(np.mean(history[-50:]))})
    return pair, history
