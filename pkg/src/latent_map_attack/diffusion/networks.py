"""Toy autoencoder, conditional denoiser and bag-of-words text encoder."""
from __future__ import annotations

import math
import re

import torch
import torch.nn.functional as F
from torch import nn

# Every word the caption grammar and the guidance prompts can produce.
VOCABULARY = (
    "a one two three lane road with pedestrian crossing shadows shadow pattern wet "
    "surface bright daylight dim overcast light clean dry distorted cars warped "
    "buildings unnatural sky"
).split()


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z]+", text.lower())


class TextEncoder(nn.Module):
    """Mean of learned word embeddings followed by a linear map.

    Words outside ``VOCABULARY`` are ignored; an empty prompt maps to zeros.
    """

    def __init__(self, dim: int = 32, vocabulary=VOCABULARY):
        super().__init__()
        self.vocabulary = list(vocabulary)
        self.index = {w: i for i, w in enumerate(self.vocabulary)}
        self.embed = nn.Embedding(len(self.vocabulary), dim)
        self.proj = nn.Linear(dim, dim)
        self.dim = dim

    def bag(self, text: str) -> torch.Tensor:
        counts = torch.zeros(len(self.vocabulary), dtype=self.embed.weight.dtype,
                             device=self.embed.weight.device)
        for w in tokenize(text):
            if w in self.index:
                counts[self.index[w]] += 1.0
        return counts

    def forward(self, texts) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        bags = torch.stack([self.bag(t) for t in texts])
        n = bags.sum(1, keepdim=True)
        mean = (bags @ self.embed.weight) / n.clamp_min(1.0)
        return torch.where(n > 0, self.proj(mean), torch.zeros_like(mean))


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * ch) if emb_dim else None

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(x))
        if self.film is not None and emb is not None:
            scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return x + h


class Encoder(nn.Module):
    def __init__(self, latent_channels: int = 4, widths=(24, 48, 64)):
        super().__init__()
        c1, c2, c3 = widths
        self.net = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(c1, c1, 4, stride=2, padding=1),  # /2
            ResBlock(c1),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1),  # /4
            ResBlock(c2),
            nn.Conv2d(c2, c3, 4, stride=2, padding=1),  # /8
            ResBlock(c3),
            nn.SiLU(),
            nn.Conv2d(c3, latent_channels, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, latent_channels: int = 4, widths=(64, 48, 24, 16)):
        super().__init__()
        c0, c1, c2, c3 = widths
        self.inp = nn.Conv2d(latent_channels, c0, 3, padding=1)
        self.res0 = ResBlock(c0)
        self.up1 = nn.Conv2d(c0, c1, 3, padding=1)
        self.res1 = ResBlock(c1)
        self.up2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.up3 = nn.Conv2d(c2, c3, 3, padding=1)
        self.out = nn.Conv2d(c3, 3, 3, padding=1)

    def forward(self, z):
        h = self.res0(self.inp(z))
        h = self.res1(self.up1(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = self.up2(F.silu(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = self.up3(F.silu(F.interpolate(h, scale_factor=2, mode="nearest")))
        return torch.sigmoid(self.out(F.silu(h)))


class Autoencoder(nn.Module):
    """Deterministic convolutional autoencoder with an 8x spatial reduction."""

    downsample = 8

    def __init__(self, latent_channels: int = 4):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = Encoder(latent_channels)
        self.decoder = Decoder(latent_channels)

    def forward(self, x):
        return self.decoder(self.encoder(x))


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = (t.float().to(freqs.dtype) / T)[:, None] * freqs[None] * 100.0
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class Denoiser(nn.Module):
    """Small conditional noise predictor.

    Spatial conditioning (the per-view layout projection, pooled to latent
    resolution) enters as extra input channels, like a control branch; the
    prompt and timestep embeddings modulate every residual block.
    """

    def __init__(self, latent_channels: int = 4, control_channels: int = 3, width: int = 48,
                 text_dim: int = 32, T: int = 20):
        super().__init__()
        self.T = T
        self.latent_channels = latent_channels
        self.control_channels = control_channels
        emb = 64
        self.time_mlp = nn.Sequential(nn.Linear(32, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.text_mlp = nn.Linear(text_dim, emb)
        self.inp = nn.Conv2d(latent_channels + control_channels, width, 3, padding=1)
        self.block1 = ResBlock(width, emb)
        self.down = nn.Conv2d(width, width, 4, stride=2, padding=1)
        self.block2 = ResBlock(width, emb)
        self.up = nn.Conv2d(width, width, 3, padding=1)
        self.block3 = ResBlock(width, emb)
        self.out = nn.Conv2d(width, latent_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z, t: torch.Tensor, control: torch.Tensor, text: torch.Tensor):
        emb = self.time_mlp(timestep_embedding(t, 32, self.T).to(z.dtype)) + self.text_mlp(text)
        emb = F.silu(emb)
        h = self.inp(torch.cat([z, control], dim=1))
        h1 = self.block1(h, emb)
        h2 = self.block2(self.down(h1), emb)
        h3 = self.up(F.interpolate(h2, size=h1.shape[-2:], mode="nearest")) + h1
        h3 = self.block3(h3, emb)
        return self.out(F.silu(h3))
