"""Model-free switch transition detection by two-sided CUSUM.

The statistic runs on a scalar stream (an angle difference or a magnitude).
Noise scale comes from the median absolute first difference, so slow load
drift does not inflate it. After each alarm the baseline is re-estimated
from the samples following the alarm. The change point itself is the split
that best separates the segment means around the alarm.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .common import require_samples

MIN_SAMPLES = 100
_MAD_TO_SIGMA = 1.0 / (0.6745 * np.sqrt(2.0))


def noise_sigma(x: np.ndarray) -> float:
    d = np.diff(x)
    return float(np.median(np.abs(d - np.median(d))) * _MAD_TO_SIGMA)


def _refine(x: np.ndarray, start: int, fired: int, end: int) -> int:
    """Split index in (start, fired] maximising the mean-shift likelihood on x[start:end]."""
    seg = x[start:end]
    m = seg.size
    c = np.cumsum(seg)
    k = np.arange(1, m)
    left = c[:-1] / k
    right = (c[-1] - c[:-1]) / (m - k)
    stat = k * (m - k) / m * (left - right) ** 2
    stat[fired - start :] = -np.inf
    return start + int(np.argmax(stat)) + 1


def cusum_change_points(
    series,
    timestamps=None,
    *,
    drift: float = 2.0,
    threshold: float = 8.0,
    warmup: int = 50,
    sigma: float | None = None,
) -> list:
    """Change points of ``series``; timestamps when given, otherwise indices.

    ``drift`` and ``threshold`` are in units of the noise sigma. The default
    reference shift of two sigma tunes the detector to steps of about four
    sigma or more, which keeps slow load wander below the alarm level.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValidationError("series must be one-dimensional")
    require_samples(x.size, MIN_SAMPLES, "cusum_change_points")
    if not np.all(np.isfinite(x)):
        raise ValidationError("series contains non-finite values")
    if timestamps is not None and len(timestamps) != x.size:
        raise ValidationError("timestamps and series lengths differ")
    if warmup < 2:
        raise ValidationError("warmup must cover at least two samples")
    s = noise_sigma(x) if sigma is None else float(sigma)
    if s <= 0:
        s = max(float(np.std(x)), np.finfo(float).tiny)
        if np.ptp(x) == 0:
            return []
    k, h = drift * s, threshold * s

    points: list[int] = []
    start = 0
    n = x.size
    while start < n - 1:
        mu = float(np.median(x[start : min(n, start + warmup)]))
        hi = lo = 0.0
        hi_zero = lo_zero = start - 1
        fired = None
        for j in range(start, n):
            hi = max(0.0, hi + x[j] - mu - k)
            lo = max(0.0, lo - x[j] + mu - k)
            if hi == 0.0:
                hi_zero = j
            if lo == 0.0:
                lo_zero = j
            if hi > h or lo > h:
                fired = j
                break
        if fired is None:
            break
        lo_edge = (hi_zero if hi > h else lo_zero) + 1
        points.append(_refine(x, start, fired, min(n, fired + warmup)) if fired > start else lo_edge)
        start = fired + 1
    if timestamps is None:
        return points
    ts = np.asarray(timestamps)
    return [int(ts[p]) for p in points]
