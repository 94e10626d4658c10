"""Input-preprocessing defenses and the recovery metric."""
from __future__ import annotations

import io
import math
from typing import Optional

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import median_filter

from .diffusion.sampler import ddim_denoise, forward_noise
from .errors import ConfigurationError


def _to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def jpeg_defense(image: np.ndarray, quality: int = 75) -> np.ndarray:
    """JPEG encode/decode round trip of one (3, H, W) image or a (V, 3, H, W) stack."""
    if not 1 <= int(quality) <= 100:
        raise ConfigurationError(f"JPEG quality must lie in [1, 100], got {quality}")
    image = np.asarray(image)
    if image.ndim == 4:
        return np.stack([jpeg_defense(v, quality) for v in image])
    buf = io.BytesIO()
    Image.fromarray(_to_uint8(image), mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return out.transpose(2, 0, 1).astype(np.float32)


def median_defense(image: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Per-channel spatial median with edge replication."""
    if kernel < 3 or kernel % 2 == 0:
        raise ConfigurationError(f"median kernel must be an odd integer >= 3, got {kernel}")
    image = np.asarray(image)
    size = (1,) * (image.ndim - 2) + (kernel, kernel)
    return median_filter(image, size=size, mode="nearest").astype(image.dtype)


def default_purify_steps(T: int) -> int:
    return max(1, int(math.floor(0.1 * T + 1e-9)))


def diffusion_purify(images: np.ndarray, t_purify: Optional[int], generator, conditioning=None,
                     seed: int = 0) -> np.ndarray:
    """Encode, noise to ``t_purify`` with a seeded fresh draw, DDIM back and decode.

    ``t_purify=None`` uses 10% of the generator's steps. The denoiser runs
    unconditionally unless ``conditioning`` is given, since a defender does not
    know the scene layout.
    """
    T = generator.schedule.T
    t = default_purify_steps(T) if t_purify is None else int(t_purify)
    if not 0 <= t < T:
        raise ConfigurationError(f"t_purify must lie in [0, {T}), got {t}")
    x = torch.from_numpy(np.asarray(images, dtype=np.float32)).to(generator.dtype)
    with torch.no_grad():
        z0 = generator.encode(x)
        g = torch.Generator().manual_seed(int(seed))
        noise = torch.randn(z0.shape, generator=g, dtype=torch.float64).to(z0.dtype)
        z = forward_noise(z0, torch.zeros_like(z0), t, noise, generator.schedule)
        z = ddim_denoise(z, t, conditioning, generator, generator.schedule)
        out = generator.decode(z)
    return out.cpu().float().numpy()


def recovery_fraction(orig_count: float, adv_count: float, def_count: float) -> Optional[float]:
    """Share of the attack's count change undone by the defense.

    (def - adv) / (orig - adv); for injection this equals (adv - def) / (adv - orig).
    Returns None when the attack changed nothing.
    """
    if orig_count == adv_count:
        return None
    return (def_count - adv_count) / (orig_count - adv_count)
