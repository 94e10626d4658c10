"""Query-based vectorized map model: multi-view images in, Q scored polylines out."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ContractViolation, NumericalFailure
from ..geometry import BEV_X_RANGE, BEV_Y_RANGE, CLASSES

FORMAT = "lma-victim-v1"
INIT_CLASS_BIAS = -2.0


@dataclass
class MapPrediction:
    """Raw decoder output: ``logits`` (Q, C) and ``points`` (Q, N_p, 2) in BEV metres."""

    logits: torch.Tensor
    points: torch.Tensor

    def __post_init__(self):
        if self.logits.ndim != 2 or self.points.ndim != 3 or self.points.shape[-1] != 2:
            raise ContractViolation(
                f"bad prediction shapes {tuple(self.logits.shape)}, {tuple(self.points.shape)}"
            )
        if self.logits.shape[0] != self.points.shape[0]:
            raise ContractViolation("logits and points disagree on the query count")
        if not (torch.isfinite(self.logits).all() and torch.isfinite(self.points).all()):
            raise NumericalFailure("non-finite map prediction")

    @property
    def num_queries(self) -> int:
        return self.logits.shape[0]

    @property
    def confidences(self) -> torch.Tensor:
        return torch.sigmoid(self.logits).max(dim=-1).values

    def detach(self) -> "MapPrediction":
        return MapPrediction(self.logits.detach(), self.points.detach())


class MapModel(Protocol):
    """What the attack, baselines and harness need from a map-construction model.

    Any model exposing these attributes and a differentiable ``predict`` can
    stand in for the toy network, e.g. a wrapper around a full-scale detector
    that reorders its outputs into (Q, C) logits and (Q, N_p, 2) BEV points.
    """

    num_queries: int
    num_points: int
    classes: tuple[str, ...]
    num_views: int

    def predict(self, images: torch.Tensor, camera_params: Sequence | None = None) -> MapPrediction: ...


class ViewEncoder(nn.Module):
    def __init__(self, width: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 24, 5, stride=2, padding=2), nn.ReLU(),  # 64
            nn.Conv2d(24, 48, 3, stride=2, padding=1), nn.ReLU(),  # 32
            nn.Conv2d(48, width, 3, stride=2, padding=1), nn.ReLU(),  # 16
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),  # 8
            nn.Conv2d(width, width, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class ToyMapNet(nn.Module):
    """Convolutional view encoder with a transformer query decoder.

    Each view becomes a grid of tokens tagged with learned view and position
    embeddings; Q learned queries cross-attend to all tokens and regress one
    class-scored polyline each.
    """

    def __init__(self, num_views: int = 2, image_size: int = 128, num_queries: int = 20,
                 num_points: int = 10, width: int = 64, layers: int = 2, heads: int = 4):
        super().__init__()
        self.num_views = num_views
        self.image_size = image_size
        self.num_queries = num_queries
        self.num_points = num_points
        self.classes = CLASSES
        self.width = width
        self.layers = layers
        self.heads = heads
        self.encoder = ViewEncoder(width)
        grid = image_size // 16
        self.pos = nn.Parameter(torch.randn(num_views, width, grid, grid) * 0.02)
        self.queries = nn.Parameter(torch.randn(num_queries, width) * 0.1)
        self.decoder = nn.ModuleList(
            nn.TransformerDecoderLayer(width, heads, 2 * width, dropout=0.0, batch_first=True)
            for _ in range(layers)
        )
        self.class_head = nn.Linear(width, len(CLASSES))
        self.point_head = nn.Sequential(nn.Linear(width, width), nn.ReLU(), nn.Linear(width, num_points * 2))
        nn.init.normal_(self.class_head.weight, std=1e-3)
        nn.init.constant_(self.class_head.bias, INIT_CLASS_BIAS)
        scale = torch.tensor([BEV_X_RANGE[1], BEV_Y_RANGE[1]])
        self.register_buffer("point_scale", scale, persistent=False)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``images`` (B, V, 3, H, W) -> logits (B, Q, C), points (B, Q, N_p, 2)."""
        B, V = images.shape[:2]
        feats = self.encoder(images.flatten(0, 1))
        feats = feats.unflatten(0, (B, V)) + self.pos
        tokens = feats.permute(0, 1, 3, 4, 2).reshape(B, -1, self.width)
        h = self.queries.expand(B, -1, -1)
        for layer in self.decoder:
            h = layer(h, tokens)
        logits = self.class_head(h)
        pts = torch.tanh(self.point_head(h)).view(B, self.num_queries, self.num_points, 2)
        return logits, pts * self.point_scale.to(pts.dtype)

    def config(self) -> dict:
        return {
            "num_views": self.num_views,
            "image_size": self.image_size,
            "num_queries": self.num_queries,
            "num_points": self.num_points,
            "width": self.width,
            "layers": self.layers,
            "heads": self.heads,
        }


class ToyVictim:
    """Eval-mode wrapper implementing the ``MapModel`` contract."""

    def __init__(self, net: ToyMapNet, info: dict | None = None):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.info = dict(info or {})

    num_queries = property(lambda self: self.net.num_queries)
    num_points = property(lambda self: self.net.num_points)
    num_views = property(lambda self: self.net.num_views)
    classes = property(lambda self: self.net.classes)

    @property
    def dtype(self) -> torch.dtype:
        return self.net.queries.dtype

    def to(self, dtype: torch.dtype) -> "ToyVictim":
        self.net.to(dtype)
        return self

    def predict(self, images: torch.Tensor, camera_params: Sequence | None = None) -> MapPrediction:
        """Differentiable prediction for one scene's (V, 3, H, W) images in [0, 1]."""
        if images.ndim != 4 or images.shape[0] != self.num_views:
            raise ContractViolation(
                f"expected ({self.num_views}, 3, H, W) images, got {tuple(images.shape)}"
            )
        if camera_params is not None and len(camera_params) != images.shape[0]:
            raise ContractViolation(f"{len(camera_params)} cameras for {images.shape[0]} views")
        if images.shape[-1] != self.net.image_size or images.shape[-2] != self.net.image_size:
            raise ContractViolation(f"model expects {self.net.image_size}px views")
        logits, points = self.net(images.to(self.dtype)[None])
        return MapPrediction(logits[0], points[0])

    def manifest(self) -> dict:
        return {
            "format": FORMAT,
            "classes": list(self.classes),
            "architecture": self.net.config(),
            "input": {"range": [0.0, 1.0], "layout": "views x 3 x H x W", "rig": "front, back"},
            "points_frame": "BEV metres, ego frame",
            **self.info,
        }

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), d / "victim.pt")
        (d / "victim.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "ToyVictim":
        d = Path(directory)
        manifest = json.loads((d / "victim.json").read_text())
        if manifest.get("format") != FORMAT:
            raise ContractViolation(f"unexpected victim format {manifest.get('format')!r}")
        net = ToyMapNet(**manifest["architecture"])
        net.load_state_dict(torch.load(d / "victim.pt", map_location="cpu", weights_only=True))
        info = {k: v for k, v in manifest.items()
                if k not in ("format", "classes", "architecture", "input", "points_frame")}
        return cls(net, info)


def confidence_term(logits: torch.Tensor) -> torch.Tensor:
    """Mean over queries of max_c sigmoid(logit)."""
    return torch.sigmoid(logits).max(dim=-1).values.mean()


def softplus_neg(x: torch.Tensor) -> torch.Tensor:
    """-log(sigmoid(x)), computed stably."""
    return F.softplus(-x)
