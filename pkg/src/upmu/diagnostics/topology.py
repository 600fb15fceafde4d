"""Switch-status identification by per-sample residual voting.

For every candidate switch configuration the feeder is solved at each sample
with the source pinned to the measured substation voltage and loads
back-inferred from metered bus currents. The configuration whose predicted
meter voltages lie closest to the measured ones gets that sample's vote.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import AmbiguousTopology, ComputationError, ValidationError
from ..feeder.model import FeederModel, Load
from ..feeder.powerflow import solve_power_flow
from ..feeder.telemetry import MeterStream
from ..phasor import wrap_angles
from .common import require_samples

MIN_SAMPLES = 30
RESIDUALS = ("complex", "angle", "magnitude")


@dataclass(frozen=True)
class TopologyHypothesis:
    id: str
    status: tuple[bool, ...]  # one entry per switch, in model switch order

    @classmethod
    def from_closed(cls, model: FeederModel, closed: Sequence[str], id: str | None = None) -> "TopologyHypothesis":
        names = [sw.id for sw in model.switches]
        unknown = set(closed) - set(names)
        if unknown:
            raise ValidationError(f"unknown switches {sorted(unknown)}")
        hid = id if id is not None else ("+".join(sorted(closed)) or "none")
        return cls(hid, tuple(n in closed for n in names))

    def closed(self, model: FeederModel) -> list[str]:
        return [sw.id for sw, s in zip(model.switches, self.status) if s]


@dataclass
class VotingResult:
    winner: TopologyHypothesis
    shares: dict[str, float]
    votes: np.ndarray  # (T,) index into `hypotheses`, -1 on gap samples
    residuals: np.ndarray  # (T, H) residual per sample and hypothesis, inf if disqualified
    hypotheses: list[TopologyHypothesis]
    disqualified: dict[str, str] = field(default_factory=dict)


def inferred_loads(model: FeederModel, meters: Mapping[str, MeterStream],
                   pseudo_loads: Mapping[str, Sequence[complex]] | None = None):
    """Loads for the solver: metered buses use S = V conj(I), the rest use
    pseudo values (model values unless overridden). Returns (model, values)
    with values of shape (T, n_loads, 3)."""
    t_len = len(next(iter(meters.values())).voltage)
    metered = {}
    for m in model.meters:
        if m.branch is None and m.bus != model.source_bus and m.id in meters:
            ms = meters[m.id]
            metered[m.bus] = ms.voltage * np.conj(ms.current)
    loads, values = [], []
    seen = set()
    for ld in model.loads:
        if ld.bus in metered:
            if ld.bus in seen:
                continue
            seen.add(ld.bus)
            loads.append(Load(ld.bus, np.zeros(3), "power"))
            values.append(metered[ld.bus])
        else:
            pseudo = ld.value if pseudo_loads is None or ld.bus not in pseudo_loads else pseudo_loads[ld.bus]
            loads.append(Load(ld.bus, np.asarray(pseudo, dtype=complex), ld.kind))
            values.append(np.broadcast_to(np.asarray(pseudo, dtype=complex), (t_len, 3)))
    for bus, s in metered.items():
        if bus not in seen:
            loads.append(Load(bus, np.zeros(3), "power"))
            values.append(s)
    arr = np.stack(values, axis=1) if values else np.zeros((t_len, 0, 3), dtype=complex)
    return model.with_loads(loads), arr


def _source_voltage(model: FeederModel, meters: Mapping[str, MeterStream], t_len: int) -> np.ndarray:
    for m in model.meters:
        if m.bus == model.source_bus and m.id in meters:
            return meters[m.id].voltage
    return np.broadcast_to(model.source_voltage, (t_len, 3))


def _residual(pred: np.ndarray, meas: np.ndarray, base: float, kind: str) -> np.ndarray:
    if kind == "complex":
        return np.sum(np.abs(pred - meas) ** 2, axis=1) / base**2
    if kind == "magnitude":
        return np.sum((np.abs(pred) - np.abs(meas)) ** 2, axis=1) / base**2
    d = wrap_angles(np.angle(pred) - np.angle(meas))
    return np.sum(d**2, axis=1)


def detect_topology_voting(
    model: FeederModel,
    hypotheses: Sequence[TopologyHypothesis],
    meters: Mapping[str, MeterStream],
    *,
    residual: str = "complex",
    pseudo_loads: Mapping[str, Sequence[complex]] | None = None,
) -> VotingResult:
    """Plurality vote over samples; ties in a sample go to the lowest hypothesis id."""
    if residual not in RESIDUALS:
        raise ValidationError(f"residual must be one of {RESIDUALS}")
    hyps = sorted(hypotheses, key=lambda h: h.id)
    if not hyps:
        raise ValidationError("at least one hypothesis is required")
    if len({h.id for h in hyps}) != len(hyps):
        raise ValidationError("hypothesis ids must be unique")
    n_sw = len(model.switches)
    for h in hyps:
        if len(h.status) != n_sw:
            raise ValidationError(f"hypothesis {h.id} has {len(h.status)} switch bits, model has {n_sw}")
    if not meters:
        raise ValidationError("no meter data supplied")
    t_len = len(next(iter(meters.values())).voltage)
    require_samples(t_len, MIN_SAMPLES, "detect_topology_voting")
    compared = [m for m in model.meters if m.id in meters]
    ok = np.ones(t_len, dtype=bool)
    for m in compared:
        ok &= np.all(np.isfinite(meters[m.id].voltage), axis=1) & np.all(np.isfinite(meters[m.id].current), axis=1)
    sel = {k: MeterStream(v.meter_id, v.bus, v.voltage[ok], v.current[ok], v.v_base, v.i_base) for k, v in meters.items()}
    n = int(ok.sum())
    if n == 0:
        raise ValidationError("every sample is a gap")

    base_model, load_values = inferred_loads(model, sel, pseudo_loads)
    src = _source_voltage(model, sel, n)
    res = np.full((n, len(hyps)), np.inf)
    disq: dict[str, str] = {}
    for j, h in enumerate(hyps):
        try:
            sol = solve_power_flow(base_model.with_switches(h.status), load_values=load_values, source_voltage=src)
        except ComputationError as exc:
            disq[h.id] = f"{type(exc).__name__}: {exc}"
            continue
        total = np.zeros(n)
        for m in compared:
            total += _residual(sol.voltage(m.bus), sel[m.id].voltage, model.bus_base(m.bus), residual)
        res[:, j] = total
    if len(disq) == len(hyps):
        raise ComputationError(f"every hypothesis failed to solve: {disq}")
    votes_ok = np.argmin(res, axis=1)  # first minimum, i.e. lowest id
    counts = np.bincount(votes_ok, minlength=len(hyps))
    shares = {h.id: float(c) / n for h, c in zip(hyps, counts)}
    top = counts.max()
    tied = [h.id for h, c in zip(hyps, counts) if c == top]
    if len(tied) > 1:
        raise AmbiguousTopology(f"hypotheses {tied} tie with {top} votes each", tied)
    votes = np.full(t_len, -1)
    votes[ok] = votes_ok
    full_res = np.full((t_len, len(hyps)), np.nan)
    full_res[ok] = res
    return VotingResult(hyps[int(np.argmax(counts))], shares, votes, full_res, hyps, disq)
