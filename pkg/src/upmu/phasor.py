"""Phasor primitives: angle arithmetic, single-cycle DFT, TVE, P12 approximation.

Angles are radians on the half-open branch cut (-pi, pi]; magnitudes are RMS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DegenerateReference,
    InsufficientSamples,
    InvalidAngle,
    InvalidReactance,
    ValidationError,
)

TWO_PI = 2.0 * math.pi
PHASES = ("a", "b", "c")


def wrap_angle(theta: float) -> float:
    """Map ``theta`` onto (-pi, pi]; -pi itself maps to +pi."""
    if not math.isfinite(theta):
        raise InvalidAngle(f"angle must be finite, got {theta!r}")
    r = theta - TWO_PI * math.ceil((theta - math.pi) / TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    elif r > math.pi:
        r -= TWO_PI
    return r


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise InvalidAngle("angles must be finite")
    r = theta - TWO_PI * np.ceil((theta - math.pi) / TWO_PI)
    r = np.where(r <= -math.pi, r + TWO_PI, r)
    return np.where(r > math.pi, r - TWO_PI, r)


def angle_diff(a: float, b: float) -> float:
    return wrap_angle(a - b)


@dataclass(frozen=True)
class Phasor:
    magnitude: float
    angle: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.magnitude) and self.magnitude >= 0):
            raise ValidationError(f"phasor magnitude must be finite and >= 0, got {self.magnitude!r}")
        object.__setattr__(self, "angle", wrap_angle(self.angle))

    @classmethod
    def from_complex(cls, z: complex) -> "Phasor":
        z = complex(z)
        if z == 0:
            return cls(0.0, 0.0)
        return cls(abs(z), math.atan2(z.imag, z.real))

    @classmethod
    def from_degrees(cls, magnitude: float, angle_deg: float) -> "Phasor":
        return cls(magnitude, math.radians(angle_deg))

    @property
    def complex(self) -> complex:
        return complex(self.magnitude * math.cos(self.angle), self.magnitude * math.sin(self.angle))

    @property
    def angle_deg(self) -> float:
        return math.degrees(self.angle)


@dataclass(frozen=True)
class ThreePhaseSet:
    a: Phasor
    b: Phasor
    c: Phasor

    @classmethod
    def from_array(cls, values: Sequence[complex]) -> "ThreePhaseSet":
        if len(values) != 3:
            raise ValidationError("a three-phase set needs exactly three values")
        return cls(*(Phasor.from_complex(v) for v in values))

    def to_array(self) -> np.ndarray:
        return np.array([self.a.complex, self.b.complex, self.c.complex])

    def __iter__(self) -> Iterator[Phasor]:
        return iter((self.a, self.b, self.c))


@dataclass(frozen=True)
class Frame:
    """One timestamped three-phase voltage + current report from one meter."""

    timestamp: int
    meter_id: str
    voltage: ThreePhaseSet
    current: ThreePhaseSet


def estimate_phasor(window: Sequence[float], nominal_freq: float = 60.0) -> Phasor:
    """Fundamental phasor of a window spanning exactly one nominal cycle.

    Rectangular single-bin DFT; returns the RMS magnitude. ``nominal_freq`` only
    documents the cycle length the window is assumed to cover.
    """
    x = np.asarray(window, dtype=float)
    n = x.size
    if n < 8:
        raise InsufficientSamples(f"need at least 8 samples per cycle, got {n}")
    if nominal_freq <= 0:
        raise ValidationError("nominal frequency must be positive")
    k = np.arange(n)
    peak = 2.0 / n * np.sum(x * np.exp(-1j * TWO_PI * k / n))
    return Phasor.from_complex(peak / math.sqrt(2.0))


def synthesize_cycle(
    phasor: Phasor, samples_per_cycle: int = 120, harmonics: dict[int, complex] | None = None
) -> np.ndarray:
    """Sample one cycle of the waveform whose fundamental is ``phasor``.

    ``harmonics`` maps harmonic order to an RMS complex amplitude.
    """
    k = np.arange(samples_per_cycle)
    wt = TWO_PI * k / samples_per_cycle
    x = math.sqrt(2.0) * phasor.magnitude * np.cos(wt + phasor.angle)
    for order, amp in (harmonics or {}).items():
        x = x + math.sqrt(2.0) * abs(amp) * np.cos(order * wt + np.angle(amp))
    return x


def tve(measured: Phasor, reference: Phasor) -> float:
    """Total vector error as a fraction of the reference magnitude."""
    if reference.magnitude <= 0:
        raise DegenerateReference("TVE needs a non-zero reference phasor")
    return abs(measured.complex - reference.complex) / reference.magnitude


def tve_array(measured: np.ndarray, reference: np.ndarray) -> np.ndarray:
    reference = np.asarray(reference, dtype=complex)
    if np.any(np.abs(reference) == 0):
        raise DegenerateReference("TVE needs non-zero reference phasors")
    return np.abs(np.asarray(measured, dtype=complex) - reference) / np.abs(reference)


def power_flow_approx(v1: float, v2: float, x: float, delta: float) -> float:
    """Real power across a mainly inductive line, P12 = V1 V2 sin(delta) / X."""
    if not x > 0:
        raise InvalidReactance(f"reactance must be positive, got {x!r}")
    return v1 * v2 / x * math.sin(delta)
