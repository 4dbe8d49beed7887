"""Gaussian kernel density estimation over topic durations.

The model stores the sample durations themselves; Silverman's rule sets
the bandwidth (floored at 1 second when the sample spread is zero).
Sampling picks a stored duration uniformly and adds bandwidth-scaled
Gaussian noise, rejecting draws shorter than a minimum clip duration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

BANDWIDTH_FLOOR = 1.0  # seconds, used when the sample spread is zero


@dataclass(frozen=True)
class KdeModel:
    samples: np.ndarray
    bandwidth: float

    def density(self, x) -> np.ndarray:
        """Mixture-of-Gaussians density at x."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        z = (x[:, None] - self.samples[None, :]) / self.bandwidth
        k = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        return k.mean(axis=1) / self.bandwidth


def fit_kde(durations) -> KdeModel:
    """Fit a Gaussian KDE with Silverman bandwidth 1.06 * std * m^(-1/5)."""
    durations = np.asarray(list(durations), dtype=np.float64)
    if durations.size < 2:
        raise DataError(f"KDE needs at least 2 durations, got {durations.size}")
    if np.any(durations <= 0.0) or not np.isfinite(durations).all():
        raise DataError("KDE durations must be positive and finite")
    sigma = float(durations.std(ddof=1))
    if sigma == 0.0:
        bandwidth = BANDWIDTH_FLOOR
    else:
        bandwidth = 1.06 * sigma * durations.size ** (-0.2)
    return KdeModel(samples=durations.copy(), bandwidth=bandwidth)


def sample_duration(kde: KdeModel, rng: np.random.Generator,
                    min_duration: float = 1.0) -> float:
    """One smoothed draw, rejection-resampled to be at least min_duration."""
    while True:
        base = kde.samples[rng.integers(kde.samples.size)]
        value = base + kde.bandwidth * rng.standard_normal()
        if value >= min_duration:
            return float(value)


def segment_by_kde(end_times, kde: KdeModel, rng: np.random.Generator,
                   min_duration: float = 1.0) -> list[list[int]]:
    """Cut a clip timeline into segments of KDE-sampled durations.

    Walks the timeline drawing target durations; each segment closes at
    the first clip whose end time reaches the running target. The
    remainder forms the final segment. Every clip lands in exactly one
    segment.
    """
    end_times = list(end_times)
    n = len(end_times)
    segments = []
    cur = 0
    cut_time = 0.0
    while cur < n:
        target = cut_time + sample_duration(kde, rng, min_duration)
        j = cur
        while j < n - 1 and end_times[j] < target:
            j += 1
        segments.append(list(range(cur, j + 1)))
        cut_time = end_times[j]
        cur = j + 1
    return segments
