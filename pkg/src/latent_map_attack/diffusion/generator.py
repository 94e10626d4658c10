"""The conditional latent generator: autoencoder + denoiser + schedule + text encoder."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ContractViolation
from .networks import Autoencoder, Denoiser, TextEncoder
from .sampler import ConditioningBundle
from .schedule import NoiseSchedule, build_schedule

log = logging.getLogger(__name__)

FORMAT = "lma-generator-v1"
DEFAULT_GUIDANCE = 2.0


class LatentGenerator:
    def __init__(self, autoencoder: Autoencoder, denoiser: Denoiser, text_encoder: TextEncoder,
                 schedule: NoiseSchedule, latent_scale: float = 1.0, info: Optional[dict] = None):
        self.autoencoder = autoencoder.eval()
        self.denoiser = denoiser.eval()
        self.text_encoder = text_encoder.eval()
        self.schedule = schedule
        self.latent_scale = float(latent_scale)
        self.info = dict(info or {})
        for p in self.parameters():
            p.requires_grad_(False)

    @classmethod
    def create(cls, T: int = 20, beta_start: float = 1e-4, beta_end: float = 0.02,
               latent_channels: int = 4, seed: int = 0) -> "LatentGenerator":
        torch.manual_seed(seed)
        text = TextEncoder(32)
        return cls(Autoencoder(latent_channels), Denoiser(latent_channels, 3, 48, text.dim, T), text,
                   build_schedule(T, beta_start, beta_end))

    def parameters(self):
        for m in (self.autoencoder, self.denoiser, self.text_encoder):
            yield from m.parameters()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.autoencoder.parameters()).dtype

    def to(self, dtype: torch.dtype) -> "LatentGenerator":
        for m in (self.autoencoder, self.denoiser, self.text_encoder):
            m.to(dtype)
        return self

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        d = self.autoencoder.downsample
        return self.autoencoder.latent_channels, height // d, width // d

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Deterministic latent code of (V, 3, H, W) images in [0, 1]."""
        if images.min() < 0 or images.max() > 1:
            log.warning("encode: pixels outside [0, 1] clamped")
            images = images.clamp(0, 1)
        return self.autoencoder.encoder(images.to(self.dtype)) * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.autoencoder.decoder(z / self.latent_scale).clamp(0, 1)

    def embed_prompt(self, prompt: str) -> torch.Tensor:
        with torch.no_grad():
            return self.text_encoder(prompt)[0]

    def conditioning(self, scene, guidance_scale: float = DEFAULT_GUIDANCE) -> ConditioningBundle:
        from ..corpus.render import render_control

        control = np.stack([render_control(scene.gt_layout, cam) for cam in scene.cameras])
        return ConditioningBundle(
            prompt_embedding=self.embed_prompt(scene.prompt),
            bev_layout=list(scene.gt_layout),
            camera_params=list(scene.cameras),
            guidance_scale=guidance_scale,
            control=torch.from_numpy(control).to(self.dtype),
        )

    def __call__(self, z: torch.Tensor, t: int, cond: Optional[ConditioningBundle]) -> torch.Tensor:
        """Noise prediction eps_theta(z_t, t, cond); ``cond=None`` is the null condition."""
        V = z.shape[0]
        tt = torch.full((V,), int(t), dtype=torch.long)
        if cond is None:
            control = torch.zeros(V, self.denoiser.control_channels, *z.shape[-2:], dtype=z.dtype)
            text = torch.zeros(V, self.text_encoder.dim, dtype=z.dtype)
        else:
            if cond.control is None or cond.control.shape[0] != V:
                raise ContractViolation("conditioning needs one control map per latent view")
            key = ("pooled", tuple(z.shape[-2:]), z.dtype)
            if key not in cond.extra:
                cond.extra[key] = F.adaptive_avg_pool2d(cond.control.to(z.dtype), z.shape[-2:])
            control = cond.extra[key]
            text = cond.prompt_embedding.to(z.dtype).expand(V, -1)
        return self.denoiser(z, tt, control, text)

    # -- persistence ---------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format": FORMAT,
            "schedule": self.schedule.to_record(),
            "latent": {
                "channels": self.autoencoder.latent_channels,
                "downsample": self.autoencoder.downsample,
                "scale": self.latent_scale,
            },
            "conditioning": {
                "text_encoder": "bag-of-words",
                "text_dim": self.text_encoder.dim,
                "vocabulary": self.text_encoder.vocabulary,
                "control_channels": ["divider", "boundary", "crossing"],
                "null_condition": "zero control and zero prompt embedding",
                "default_guidance_scale": DEFAULT_GUIDANCE,
            },
            **self.info,
        }

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "autoencoder": self.autoencoder.state_dict(),
                "denoiser": self.denoiser.state_dict(),
                "text_encoder": self.text_encoder.state_dict(),
            },
            d / "generator.pt",
        )
        (d / "generator.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "LatentGenerator":
        d = Path(directory)
        manifest = json.loads((d / "generator.json").read_text())
        if manifest.get("format") != FORMAT:
            raise ContractViolation(f"unexpected generator format {manifest.get('format')!r}")
        sched = manifest["schedule"]
        schedule = build_schedule(sched["T"], sched["beta_start"], sched["beta_end"])
        lat = manifest["latent"]
        cond = manifest["conditioning"]
        text = TextEncoder(cond["text_dim"], cond["vocabulary"])
        ae = Autoencoder(lat["channels"])
        den = Denoiser(lat["channels"], len(cond["control_channels"]), 48, cond["text_dim"], sched["T"])
        state = torch.load(d / "generator.pt", map_location="cpu", weights_only=True)
        ae.load_state_dict(state["autoencoder"])
        den.load_state_dict(state["denoiser"])
        text.load_state_dict(state["text_encoder"])
        info = {k: v for k, v in manifest.items() if k not in ("format", "schedule", "latent", "conditioning")}
        return cls(ae, den, text, schedule, lat["scale"], info)
