"""Fault location by grid search over shunt-fault positions.

Loads are fixed from the pre-fault window: metered buses use their measured
draw, unmetered loads are the model's values scaled per phase until the
solved substation current matches the measured one. Each candidate fault
(branch, fraction on a 1% grid) is solved with the source pinned to the
measured substation voltage; the candidate whose remote meter voltages and
substation current best match the during-fault averages wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import AmbiguousLocation, ComputationError, NoFaultDetected, ValidationError
from ..feeder.model import FeederModel, Load
from ..feeder.powerflow import solve_power_flow
from ..feeder.telemetry import DEFAULT_ANGLE_SIGMA, DEFAULT_FAULT_RESISTANCE, DEFAULT_MAGNITUDE_SIGMA_PU, MeterStream
from ..phasor import PHASES

GRID_STEP = 0.01
DEFAULT_CURRENT_RATIO = 2.0
# near-ties: mismatch within rel * min + abs of the best distinct location
DEFAULT_TIE_RELATIVE = 1e-6
DEFAULT_TIE_ABSOLUTE = 1e-9
_CALIBRATION_ITERATIONS = 8


@dataclass(frozen=True)
class FaultLocation:
    branch_id: str
    distance_fraction: float
    mismatch: float
    phases: str = "abc"
    candidates: list[tuple[str, float, float]] = field(default_factory=list)  # best per branch


def _mean(ms: MeterStream, what: str) -> tuple[np.ndarray, int]:
    x = getattr(ms, what)
    ok = np.all(np.isfinite(x), axis=1)
    if not ok.any():
        raise ValidationError(f"meter {ms.meter_id} has no valid {what} samples")
    return x[ok].mean(axis=0), int(ok.sum())


def _substation_meter(model: FeederModel, meters: Mapping[str, MeterStream]) -> str:
    for m in model.meters:
        if m.id in meters and m.bus == model.source_bus:
            if m.branch is None:
                return m.id
            others = [b for b in model.branches if model.source_bus in (b.from_bus, b.to_bus)]
            if len(others) == 1:
                return m.id
    raise ValidationError("fault location needs a meter reading the total substation current")


def faulted_phases(i_pre: np.ndarray, i_during: np.ndarray, ratio: float = DEFAULT_CURRENT_RATIO) -> str:
    mask = np.abs(i_during) > ratio * np.abs(i_pre)
    return "".join(p for p, f in zip(PHASES, mask) if f)


def _location_key(model: FeederModel, branch_id: str, d: float) -> tuple:
    br = model.branch(branch_id)
    if d <= GRID_STEP / 2:
        return ("bus", br.from_bus)
    if d >= 1 - GRID_STEP / 2:
        return ("bus", br.to_bus)
    return ("line", branch_id, round(d, 6))


class _Problem:
    def __init__(self, model, pre, during, sub_id, resistance, phases):
        self.model = model
        self.resistance = resistance
        self.phases = phases
        self.sub_id = sub_id
        v_sub_pre, _ = _mean(pre[sub_id], "voltage")
        i_sub_pre, _ = _mean(pre[sub_id], "current")
        self.v_src, _ = _mean(during[sub_id], "voltage")
        self.i_sub, n_sub = _mean(during[sub_id], "current")
        self.remote = {}
        for m in model.meters:
            if m.id in during and m.id != sub_id:
                v, n = _mean(during[m.id], "voltage")
                self.remote[m.id] = (m.bus, v, n)
        ib = model.current_base(model.source_bus)
        self.w_i = n_sub / (DEFAULT_MAGNITUDE_SIGMA_PU**2 + DEFAULT_ANGLE_SIGMA**2 * np.abs(self.i_sub / ib) ** 2)
        self.w_v = {
            mid: n / (DEFAULT_MAGNITUDE_SIGMA_PU**2 + DEFAULT_ANGLE_SIGMA**2 * np.abs(v / model.bus_base(bus)) ** 2)
            for mid, (bus, v, n) in self.remote.items()
        }
        self.loads, self.values = self._calibrate(pre, v_sub_pre, i_sub_pre)

    def _calibrate(self, pre, v_sub, i_sub):
        model = self.model
        metered = {}
        for m in model.meters:
            if m.id in pre and m.branch is None and m.bus != model.source_bus:
                v, _ = _mean(pre[m.id], "voltage")
                i, _ = _mean(pre[m.id], "current")
                metered[m.bus] = v * np.conj(i)
        loads, fixed, scaled = [], [], []
        for ld in model.loads:
            if ld.bus in metered:
                continue
            loads.append(Load(ld.bus, ld.value, ld.kind))
            scaled.append(ld.value)
        for bus, s in metered.items():
            loads.append(Load(bus, s, "power"))
            fixed.append(s)
        base = np.array(scaled + fixed, dtype=complex).reshape(len(loads), 3)
        n_scaled = len(scaled)
        c = np.ones(3, dtype=complex)
        lm = model.with_loads(loads)
        for _ in range(_CALIBRATION_ITERATIONS if n_scaled else 0):
            vals = base.copy()
            vals[:n_scaled] *= c
            sol = solve_power_flow(lm, load_values=vals[None], source_voltage=v_sub[None])
            pred = sol.meter_reading(self.sub_id)[1][0]
            ratio = np.where(np.abs(pred) > 0, i_sub / pred, 1.0)
            c = c * np.conj(ratio)  # S = V conj(I): a current ratio k scales S by conj(k)
        vals = base.copy()
        vals[:n_scaled] *= c
        return loads, vals

    def mismatch(self, branch_id: str, fractions: np.ndarray) -> np.ndarray:
        model = self.model.with_loads(self.loads)
        fm = model.with_fault(branch_id, fractions, self.phases, self.resistance)
        b = len(fractions)
        vals = np.broadcast_to(self.values, (b, *self.values.shape))
        sol = solve_power_flow(fm, load_values=vals, source_voltage=np.broadcast_to(self.v_src, (b, 3)))
        ib = self.model.current_base(self.model.source_bus)
        _, i_pred = sol.meter_reading(self.sub_id)
        total = np.sum(self.w_i * np.abs((i_pred - self.i_sub) / ib) ** 2, axis=1)
        for mid, (bus, v, _) in self.remote.items():
            vb = self.model.bus_base(bus)
            total = total + np.sum(self.w_v[mid] * np.abs((sol.voltage(bus) - v) / vb) ** 2, axis=1)
        return total


def locate_fault(
    model: FeederModel,
    prefault: Mapping[str, MeterStream],
    during: Mapping[str, MeterStream],
    *,
    resistance: float = DEFAULT_FAULT_RESISTANCE,
    phases: str | None = None,
    current_ratio: float = DEFAULT_CURRENT_RATIO,
    tie_relative: float = DEFAULT_TIE_RELATIVE,
    tie_absolute: float = DEFAULT_TIE_ABSOLUTE,
) -> FaultLocation:
    """Best (branch, fraction) for a shunt fault explaining the during-fault window."""
    sub_id = _substation_meter(model, prefault)
    if sub_id not in during:
        raise ValidationError("the during-fault window lacks the substation meter")
    i_pre, _ = _mean(prefault[sub_id], "current")
    i_dur, _ = _mean(during[sub_id], "current")
    detected = faulted_phases(i_pre, i_dur, current_ratio)
    if not detected:
        raise NoFaultDetected("substation current shows no fault-level rise on any phase")
    phases = phases or detected
    prob = _Problem(model, prefault, during, sub_id, resistance, phases)

    grid = np.round(np.arange(0, 1 + GRID_STEP / 2, GRID_STEP), 10)
    best_per_branch = []
    for br in sorted(model.lines, key=lambda b: b.id):
        try:
            chi = prob.mismatch(br.id, grid)
        except ComputationError:
            continue
        k = int(np.argmin(chi))
        d, val = float(grid[k]), float(chi[k])
        if 0 < k < len(grid) - 1:
            d, val = _refine(prob, br.id, grid, chi, k)
        best_per_branch.append((br.id, d, val))
    if not best_per_branch:
        raise ComputationError("no fault candidate could be solved")
    best_val = min(v for _, _, v in best_per_branch)
    tol = tie_relative * best_val + tie_absolute
    near = [c for c in best_per_branch if c[2] <= best_val + tol]
    locations = {}
    for c in near:
        locations.setdefault(_location_key(model, c[0], c[1]), c)
    if len(locations) > 1:
        raise AmbiguousLocation(
            f"{len(locations)} distinct fault locations fit equally well", sorted(locations.values())
        )
    # one physical location: report the lowest branch id among its aliases
    bid, d, val = min(near, key=lambda c: c[0])
    return FaultLocation(bid, d, val, phases, sorted(best_per_branch, key=lambda c: c[2]))


def _refine(prob: _Problem, branch_id: str, grid: np.ndarray, chi: np.ndarray, k: int) -> tuple[float, float]:
    """Vertex of the parabola through the grid minimum and its neighbours."""
    y0, y1, y2 = chi[k - 1], chi[k], chi[k + 1]
    denom = y0 - 2 * y1 + y2
    if denom <= 0:
        return float(grid[k]), float(y1)
    shift = 0.5 * (y0 - y2) / denom
    d = float(np.clip(grid[k] + shift * GRID_STEP, grid[k - 1], grid[k + 1]))
    val = float(prob.mismatch(branch_id, np.array([d]))[0])
    if val < y1:
        return d, val
    return float(grid[k]), float(y1)
