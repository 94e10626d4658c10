from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule.

    ``betas[t - 1]`` is the per-step variance for ``t = 1..T`` and
    ``alpha_bars[t]`` the cumulative product, with ``alpha_bars[0] == 1``.
    """

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ConfigurationError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])

    def to_record(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": "linear"}


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigurationError(f"T must be an integer >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    betas.flags.writeable = False
    alpha_bars.flags.writeable = False
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alpha_bars)


def compute_t_star(s: float, T: int) -> int:
    """Partial-diffusion depth ``floor(s * T)`` for strength ``s`` in (0, 1)."""
    if not (0.0 < s < 1.0):
        raise ConfigurationError(f"strength must lie in (0, 1), got {s}")
    # tolerance absorbs binary rounding such as 0.29 * 100 == 28.999999999999996
    return int(math.floor(s * T + 1e-9))
