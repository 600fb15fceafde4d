"""Ordinary least-squares impedance estimation from synchronized phasors.

Lines: V_from - V_to = Z I with Z complex symmetric (6 unknowns).
Transformers: A_t V_high - V_low = Z I_low with Z diagonal (3 unknowns).
Both are solved as real-valued systems; the condition number of the stacked
real regressor gates the answer so that poorly excited data (balanced or
identical phase currents) is refused instead of producing a number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientExcitation, ValidationError
from ..feeder.model import transformer_ratio_matrix
from .common import finite_rows, require_samples, stack

DEFAULT_MAX_CONDITION = 1e6
MIN_SAMPLES = 60

# (row phase, column phase) -> unknown index for a symmetric 3x3 matrix
_SYM_INDEX = {(0, 0): 0, (1, 1): 1, (2, 2): 2, (0, 1): 3, (1, 0): 3, (1, 2): 4, (2, 1): 4, (0, 2): 5, (2, 0): 5}


@dataclass(frozen=True)
class ImpedanceEstimate:
    branch_id: str
    z_hat: np.ndarray
    condition_metric: float
    relative_error_norm: float | None = None
    residual_rms: float = 0.0
    n_samples: int = 0


def _line_regressor(i: np.ndarray) -> np.ndarray:
    t = i.shape[0]
    phi = np.zeros((t, 3, 6), dtype=complex)
    for (r, c), k in _SYM_INDEX.items():
        phi[:, r, k] += i[:, c]
    return phi.reshape(3 * t, 6)


def _realify(phi: np.ndarray) -> np.ndarray:
    return np.block([[phi.real, -phi.imag], [phi.imag, phi.real]])


def _condition(a: np.ndarray) -> float:
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0 or s[-1] <= s[0] * np.finfo(float).eps:
        return float("inf")
    return float(s[0] / s[-1])


def excitation_condition(currents, kind: str = "line") -> float:
    """Condition number (>= 1, inf when rank deficient) of the impedance regressor."""
    i = stack(currents, "current")
    require_samples(i.shape[0], 2, "excitation_condition")
    if not np.all(np.isfinite(i)):
        raise ValidationError("currents contain non-finite values")
    if kind == "line":
        return _condition(_realify(_line_regressor(i)))
    if kind == "transformer":
        norms = np.linalg.norm(i, axis=0)
        if norms.min() == 0:
            return float("inf")
        # the real regressor is block diagonal with singular values |i_k| per phase
        return float(norms.max() / norms.min())
    raise ValidationError(f"unknown regressor kind {kind!r}")


def relative_error(z_hat: np.ndarray, z_true: np.ndarray) -> float:
    return float(np.linalg.norm(z_hat - z_true) / np.linalg.norm(z_true))


def estimate_line_impedance(
    v_from,
    v_to,
    current,
    *,
    branch_id: str = "",
    z_true: np.ndarray | None = None,
    max_condition: float = DEFAULT_MAX_CONDITION,
) -> ImpedanceEstimate:
    """Symmetric 3x3 series impedance from voltages at both ends and the line current."""
    v1, v2, i = stack(v_from), stack(v_to), stack(current, "current")
    if not v1.shape == v2.shape == i.shape:
        raise ValidationError("end voltages and current must share one time axis")
    ok = finite_rows(v1, v2, i)
    v1, v2, i = v1[ok], v2[ok], i[ok]
    require_samples(i.shape[0], MIN_SAMPLES, "estimate_line_impedance")
    a = _realify(_line_regressor(i))
    cond = _condition(a)
    if not cond <= max_condition:
        raise InsufficientExcitation(
            f"phase currents lack cross-phase excitation (condition {cond:.3g} > {max_condition:.3g})", cond
        )
    dv = (v1 - v2).reshape(-1)
    b = np.concatenate([dv.real, dv.imag])
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    z6 = x[:6] + 1j * x[6:]
    z = np.empty((3, 3), dtype=complex)
    for (r, c), k in _SYM_INDEX.items():
        z[r, c] = z6[k]
    resid = b - a @ x
    err = None if z_true is None else relative_error(z, np.asarray(z_true))
    return ImpedanceEstimate(branch_id, z, cond, err, float(np.sqrt(np.mean(resid**2))), int(i.shape[0]))


def estimate_transformer_impedance(
    v_high,
    v_low,
    i_low,
    n_t: float,
    *,
    branch_id: str = "",
    z_true: np.ndarray | None = None,
    max_condition: float = DEFAULT_MAX_CONDITION,
) -> ImpedanceEstimate:
    """Diagonal winding impedance (low-side ohms) of a delta / grounded-wye unit."""
    vh, vl, i = stack(v_high), stack(v_low), stack(i_low, "current")
    if not vh.shape == vl.shape == i.shape:
        raise ValidationError("voltages and current must share one time axis")
    ok = finite_rows(vh, vl, i)
    vh, vl, i = vh[ok], vl[ok], i[ok]
    require_samples(i.shape[0], MIN_SAMPLES, "estimate_transformer_impedance")
    cond = excitation_condition(i, "transformer")
    if not cond <= max_condition:
        raise InsufficientExcitation(f"secondary currents cannot excite the regression (condition {cond:.3g})", cond)
    y = vh @ transformer_ratio_matrix(n_t).T - vl
    # per phase complex scalar least squares: z = <i, y> / <i, i>
    z = np.sum(np.conj(i) * y, axis=0) / np.sum(np.abs(i) ** 2, axis=0)
    resid = y - i * z
    z_hat = np.diag(z)
    err = None if z_true is None else relative_error(z_hat, np.asarray(z_true))
    rms = float(np.sqrt(np.mean(np.abs(resid) ** 2) / 2))
    return ImpedanceEstimate(branch_id, z_hat, cond, err, rms, int(i.shape[0]))
