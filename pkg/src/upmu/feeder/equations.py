"""Branch voltage relations: series line drop and delta-wye transformer."""

from __future__ import annotations

import numpy as np

from ..phasor import ThreePhaseSet
from .model import TransformerBranch, check_symmetric


def line_drop(z: np.ndarray, i: ThreePhaseSet) -> ThreePhaseSet:
    """Voltage drop V_from - V_to = Z I across one three-phase line."""
    z = np.asarray(z, dtype=complex)
    check_symmetric(z, "line impedance")
    return ThreePhaseSet.from_array(z @ i.to_array())


def transformer_secondary(
    vln_high: ThreePhaseSet, i_low: ThreePhaseSet, xfmr: TransformerBranch
) -> ThreePhaseSet:
    """Low-side line-to-ground voltages, VLG = A_t VLN - Z I."""
    return ThreePhaseSet.from_array(xfmr.a_t @ vln_high.to_array() - xfmr.z_abc @ i_low.to_array())


def transformer_primary_current(i_low: np.ndarray, xfmr: TransformerBranch) -> np.ndarray:
    """High-side line currents of an ideal delta-wye unit, I_ABC = A_t^T I_abc."""
    return xfmr.a_t.T @ np.asarray(i_low, dtype=complex)
