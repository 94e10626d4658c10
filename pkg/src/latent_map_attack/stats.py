from __future__ import annotations

import math

import numpy as np
from scipy import stats


def compute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; identical inputs give 99.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * math.log10(1.0 / mse))


def bootstrap_ci(values, n_resamples: int = 10_000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float, float]:
    """Mean with a percentile bootstrap interval; one sample gives the point estimate."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("bootstrap of an empty sample")
    est = float(x.mean())
    if x.size == 1 or np.all(x == x[0]):
        return est, est, est
    res = stats.bootstrap((x,), np.mean, n_resamples=n_resamples, confidence_level=level,
                          method="percentile", rng=np.random.default_rng(seed))
    return est, float(res.confidence_interval.low), float(res.confidence_interval.high)


def sign_test_less(a, b) -> float:
    """One-sided paired sign test p-value for a < b; ties are dropped."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    wins = int(np.sum(a < b))
    losses = int(np.sum(a > b))
    if wins + losses == 0:
        return 1.0
    return float(stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)
