"""Shared helpers for the diagnostics: frame stacking and noise levels."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..errors import InsufficientSamples, ValidationError
from ..feeder.telemetry import DEFAULT_ANGLE_SIGMA, DEFAULT_MAGNITUDE_SIGMA_PU, MeterStream
from ..phasor import Frame


def stack(series, what: str = "voltage") -> np.ndarray:
    """(T, 3) complex array from a MeterStream, a Frame sequence or an array."""
    if isinstance(series, MeterStream):
        return np.asarray(getattr(series, what), dtype=complex)
    if isinstance(series, np.ndarray):
        arr = series.astype(complex)
    else:
        seq = list(series)
        if seq and isinstance(seq[0], Frame):
            arr = np.array([getattr(f, what).to_array() for f in seq])
        else:
            arr = np.asarray(seq, dtype=complex)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"expected a (T, 3) phasor series, got shape {arr.shape}")
    return arr


def require_samples(n: int, minimum: int, what: str) -> None:
    if n < minimum:
        raise InsufficientSamples(f"{what} needs at least {minimum} samples, got {n}")


def phasor_variance(v: np.ndarray, base: float, angle_sigma: float = DEFAULT_ANGLE_SIGMA,
                    magnitude_sigma_pu: float = DEFAULT_MAGNITUDE_SIGMA_PU) -> np.ndarray:
    """Variance of the complex error of a noisy phasor (radial plus tangential part)."""
    return (magnitude_sigma_pu * base) ** 2 + (angle_sigma * np.abs(v)) ** 2


def rect_covariance(v: complex, base: float, angle_sigma: float = DEFAULT_ANGLE_SIGMA,
                    magnitude_sigma_pu: float = DEFAULT_MAGNITUDE_SIGMA_PU) -> np.ndarray:
    """2x2 covariance of (Re, Im) for polar noise at operating point ``v``."""
    th = np.angle(v)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    d = np.diag([(magnitude_sigma_pu * base) ** 2, (angle_sigma * abs(v)) ** 2])
    return rot @ d @ rot.T


def time_aligned(series: Sequence[np.ndarray]) -> int:
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise ValidationError(f"series are not time-aligned (lengths {sorted(lengths)})")
    return lengths.pop()


def finite_rows(*arrays: Iterable[np.ndarray]) -> np.ndarray:
    """Mask of samples where every array is finite (drops telemetry gaps)."""
    mask = None
    for a in arrays:
        ok = np.all(np.isfinite(a), axis=1)
        mask = ok if mask is None else mask & ok
    return mask
