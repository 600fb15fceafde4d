"""Per-phase reverse power flow flags at a meter."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .common import stack

DEFAULT_DEADBAND_PU = 1e-4


def phase_real_power(voltage, current) -> np.ndarray:
    """(T, 3) real power Re(V conj(I)) in watts, positive in the load direction."""
    v, i = stack(voltage), stack(current, "current")
    if v.shape != i.shape:
        raise ValidationError("voltage and current must share one time axis")
    return np.real(v * np.conj(i))


def detect_reverse_flow(voltage, current, phase_power_base: float, deadband_pu: float = DEFAULT_DEADBAND_PU) -> np.ndarray:
    """(T, 3) boolean: True where per-phase power is below -deadband.

    ``phase_power_base`` is the single-phase VA base used to normalise power.
    Gap samples (NaN) are reported as False.
    """
    if not phase_power_base > 0:
        raise ValidationError("power base must be positive")
    if deadband_pu < 0:
        raise ValidationError("deadband must be non-negative")
    p = phase_real_power(voltage, current) / phase_power_base
    with np.errstate(invalid="ignore"):
        return np.nan_to_num(p, nan=0.0) < -deadband_pu
