"""Phase identification of an unlabelled three-phase meter.

Every bijection from the candidate's local labels to the reference phases is
scored by the summed Pearson correlation of the matched magnitude series.
The angle differences of a valid bijection must sit on a common multiple of
30 degrees (transformer connections shift by such multiples); bijections
whose mean residual from that multiple exceeds the gate are rejected.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientVariation, NoConsistentAssignment, ValidationError
from ..phasor import PHASES, wrap_angle, wrap_angles
from .common import finite_rows, require_samples, stack

MIN_SAMPLES = 300
DEFAULT_ANGLE_GATE = math.radians(5.0)
STEP = math.radians(30.0)
# Correlation sums (out of 3) closer than this are treated as a tie and
# resolved by the smallest absolute offset. Behind a delta / wye transformer
# each secondary magnitude mixes two primary phases, so two rotations score
# alike; for directly connected meters the true rotation leads by about 2.
DEFAULT_TIE_TOLERANCE = 1.0
_MIN_RELATIVE_STD = 1e-9


@dataclass(frozen=True)
class PhaseAssignment:
    meter_id: str
    mapping: dict[str, str]  # local label -> reference phase
    offset_deg: int  # multiple of 30 in (-180, 180]
    score: float  # mean Pearson correlation of matched magnitudes
    angle_residual_deg: float = 0.0

    @property
    def offset(self) -> float:
        return math.radians(self.offset_deg)


@dataclass(frozen=True)
class _Candidate:
    perm: tuple[int, ...]
    offset_steps: int
    score: float
    residual: float


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b)))


def _circular_mean(x: np.ndarray) -> float:
    return float(np.angle(np.mean(np.exp(1j * x))))


def _offset_steps(mean_angle: float) -> int:
    """Nearest multiple of 30 degrees as an integer in (-6, 6]."""
    k = int(round(mean_angle / STEP))
    k = ((k + 5) % 12) - 5
    return k


def _evaluate(ref: np.ndarray, cand: np.ndarray, corr: np.ndarray, gate: float) -> list[_Candidate]:
    out = []
    for perm in itertools.permutations(range(3)):
        # perm[local] = reference phase index
        diffs = np.stack([wrap_angles(np.angle(cand[:, j]) - np.angle(ref[:, perm[j]])) for j in range(3)], axis=1)
        centre = _circular_mean(diffs.reshape(-1))
        steps = _offset_steps(centre)
        resid = wrap_angles(diffs - steps * STEP)
        per_phase = np.array([abs(_circular_mean(resid[:, j])) for j in range(3)])
        if per_phase.max() > gate:
            continue
        score = float(sum(corr[j, perm[j]] for j in range(3)))
        out.append(_Candidate(perm, steps, score, float(per_phase.max())))
    return out


def identify_phase(
    reference,
    candidate,
    *,
    meter_id: str = "",
    angle_gate: float = DEFAULT_ANGLE_GATE,
    tie_tolerance: float = DEFAULT_TIE_TOLERANCE,
) -> PhaseAssignment:
    """Map the candidate's local labels onto the reference phases.

    Both inputs are time-aligned (T, 3) voltage phasor series (or frame
    sequences). Gap samples are dropped before scoring.
    """
    ref, cand = stack(reference), stack(candidate)
    if ref.shape != cand.shape:
        raise ValidationError("reference and candidate must be time-aligned series of equal length")
    ok = finite_rows(ref, cand)
    ref, cand = ref[ok], cand[ok]
    require_samples(ref.shape[0], MIN_SAMPLES, "identify_phase")
    mag_r, mag_c = np.abs(ref), np.abs(cand)
    for name, m in (("reference", mag_r), ("candidate", mag_c)):
        rel = m.std(axis=0) / np.maximum(m.mean(axis=0), np.finfo(float).tiny)
        if np.any(rel < _MIN_RELATIVE_STD):
            raise InsufficientVariation(f"{name} magnitudes do not vary enough to correlate")
    corr = np.array([[_pearson(mag_c[:, j], mag_r[:, r]) for r in range(3)] for j in range(3)])
    found = _evaluate(ref, cand, corr, angle_gate)
    if not found:
        raise NoConsistentAssignment(
            f"no bijection keeps angle residuals within {math.degrees(angle_gate):.3g} degrees of a 30-degree multiple"
        )
    best = max(c.score for c in found)
    near = [c for c in found if c.score >= best - tie_tolerance]
    # prefer the smallest shift, then the higher score, then the lexicographically first bijection
    pick = min(near, key=lambda c: (abs(c.offset_steps), -c.score, c.perm))
    offset_deg = 30 * pick.offset_steps
    mapping = {PHASES[j]: PHASES[pick.perm[j]] for j in range(3)}
    return PhaseAssignment(meter_id, mapping, offset_deg, pick.score / 3.0, math.degrees(pick.residual))


def relabel(series: np.ndarray, mapping: dict[str, str]) -> np.ndarray:
    """Reorder a (T, 3) candidate series into reference phase order."""
    out = np.empty_like(series)
    for local, ref in mapping.items():
        out[:, PHASES.index(ref)] = series[:, PHASES.index(local)]
    return out


def expected_offset_deg(angle: float) -> int:
    """Nearest 30-degree multiple of an angle (radians), in degrees."""
    return 30 * _offset_steps(wrap_angle(angle))
