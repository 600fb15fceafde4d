"""uPMU telemetry synthesis: scripted events, load profiles, instrument noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from ..errors import ComputationError, NotFound, ValidationError
from ..phasor import Frame, ThreePhaseSet
from .model import FeederModel, LineBranch, Load, SwitchBranch
from .powerflow import solve_power_flow

REPORT_RATE = 120  # frames per second: twice per 60 Hz cycle
DEFAULT_ANGLE_SIGMA = math.radians(0.01)
DEFAULT_MAGNITUDE_SIGMA_PU = 1.7e-4
DEFAULT_FAULT_RESISTANCE = 1e-3


@dataclass(frozen=True)
class NoiseModel:
    """Instrument noise. ``pt_ratio_error`` and ``ct_ratio_error`` are fixed
    fractional magnitude errors of the instrument transformers (0.01 reads
    1% high), applied to every voltage or current channel on top of the
    random noise."""

    angle_sigma: float = DEFAULT_ANGLE_SIGMA
    magnitude_sigma_pu: float = DEFAULT_MAGNITUDE_SIGMA_PU
    seed: int = 0
    pt_ratio_error: float = 0.0
    ct_ratio_error: float = 0.0

    def __post_init__(self):
        if self.angle_sigma < 0 or self.magnitude_sigma_pu < 0:
            raise ValidationError("noise sigmas must be non-negative")
        if self.pt_ratio_error <= -1 or self.ct_ratio_error <= -1:
            raise ValidationError("ratio errors must be greater than -1")

    @classmethod
    def noiseless(cls, seed: int = 0) -> "NoiseModel":
        return cls(0.0, 0.0, seed)


@dataclass(frozen=True)
class Event:
    """A scripted change at ``time`` seconds after the start of the run.

    kinds and their ``params``:
      switch_toggle: branch
      load_step: bus, scale
      bolted_fault: branch, distance_fraction, phases, [duration], [resistance]
      sag: depth, duration, [source]
      oscillation: amplitude, frequency, [duration], [source]
    """

    time: float
    kind: str
    params: dict = field(default_factory=dict)


_EVENT_PARAMS = {
    "switch_toggle": ({"branch"}, set()),
    "load_step": ({"bus", "scale"}, set()),
    "bolted_fault": ({"branch", "distance_fraction", "phases"}, {"duration", "resistance"}),
    "sag": ({"depth", "duration"}, {"source"}),
    "oscillation": ({"amplitude", "frequency"}, {"duration", "source"}),
}


def validate_events(model: FeederModel, events: Sequence[Event], duration: float) -> None:
    last = -math.inf
    for ev in events:
        if ev.kind not in _EVENT_PARAMS:
            raise ValidationError(f"unknown event kind {ev.kind!r}")
        required, optional = _EVENT_PARAMS[ev.kind]
        keys = set(ev.params)
        if required - keys:
            raise ValidationError(f"{ev.kind} event missing {sorted(required - keys)}")
        if keys - required - optional:
            raise ValidationError(f"{ev.kind} event has unknown keys {sorted(keys - required - optional)}")
        if not ev.time > last:
            raise ValidationError("event times must be strictly increasing")
        if not 0 <= ev.time < duration:
            raise ValidationError(f"event at {ev.time}s lies outside the {duration}s horizon")
        last = ev.time
        p = ev.params
        if ev.kind == "switch_toggle" and not isinstance(model.branch(p["branch"]), SwitchBranch):
            raise ValidationError(f"{p['branch']!r} is not a switch")
        if ev.kind == "load_step":
            model.bus_index(p["bus"])
        if ev.kind == "bolted_fault":
            if not isinstance(model.branch(p["branch"]), LineBranch):
                raise ValidationError(f"fault branch {p['branch']!r} is not a line")
            if not 0 <= p["distance_fraction"] <= 1:
                raise ValidationError("fault distance_fraction must lie in [0, 1]")
        if ev.kind in ("sag", "oscillation") and p.get("source", model.source_bus) != model.source_bus:
            raise NotFound(f"unknown source {p['source']!r}")
        if ev.kind == "sag" and not 0 <= p["depth"] < 1:
            raise ValidationError("sag depth must lie in [0, 1)")


@dataclass
class LoadProfiles:
    """Per-report multipliers. ``bus_scale[bus]`` is (T,) or (T, 3) and scales
    every load at that bus; ``source_scale`` is (T, 3) complex and scales the
    source phasors."""

    bus_scale: dict[str, np.ndarray] = field(default_factory=dict)
    source_scale: np.ndarray | None = None

    def length(self) -> int | None:
        lengths = [len(v) for v in self.bus_scale.values()]
        if self.source_scale is not None:
            lengths.append(len(self.source_scale))
        return min(lengths) if lengths else None


def random_walk_profiles(
    model: FeederModel,
    n: int,
    *,
    sigma: float = 0.01,
    spread: float = 0.2,
    source_sigma: float = 0.0,
    seed: int = 0,
) -> LoadProfiles:
    """Independent per-bus, per-phase mean-reverting load multipliers around 1.

    ``sigma`` is the per-step innovation, ``spread`` the stationary standard
    deviation; ``source_sigma`` adds the same kind of walk to the source
    magnitude (per unit).
    """
    rng = np.random.default_rng(seed)

    def walk(scale_sigma: float, stationary: float, shape) -> np.ndarray:
        if scale_sigma == 0:
            return np.zeros(shape)
        phi = math.sqrt(max(0.0, 1.0 - (scale_sigma / stationary) ** 2)) if stationary > 0 else 1.0
        out = np.empty(shape)
        x = rng.normal(0.0, stationary, shape[1:]) if stationary > 0 else np.zeros(shape[1:])
        for k in range(shape[0]):
            x = phi * x + rng.normal(0.0, scale_sigma, shape[1:])
            out[k] = x
        return out

    buses = sorted({ld.bus for ld in model.loads}, key=model.bus_index)
    bus_scale = {b: 1.0 + walk(sigma, spread, (n, 3)) for b in buses}
    source = None
    if source_sigma > 0:
        source = 1.0 + walk(source_sigma, 10 * source_sigma, (n, 3))
    return LoadProfiles(bus_scale, source)


@dataclass
class MeterStream:
    meter_id: str
    bus: str
    voltage: np.ndarray  # (T, 3) complex volts, NaN on gaps
    current: np.ndarray  # (T, 3) complex amperes, NaN on gaps
    v_base: float
    i_base: float


@dataclass
class Telemetry:
    timestamps: np.ndarray  # (T,) int64 ns
    meters: dict[str, MeterStream]
    truth: dict[str, MeterStream]
    gap: np.ndarray  # (T,) bool, frames whose power flow failed
    gap_reasons: dict[int, str]
    topology: np.ndarray  # (T,) index into `states`
    states: list[dict]

    def frames(self, meter_id: str) -> Iterator[Frame]:
        """Frames of one meter in time order; gap frames are skipped."""
        try:
            ms = self.meters[meter_id]
        except KeyError:
            raise NotFound(f"unknown meter {meter_id!r}") from None
        for k, t in enumerate(self.timestamps):
            if self.gap[k]:
                continue
            yield Frame(
                int(t),
                meter_id,
                ThreePhaseSet.from_array(ms.voltage[k]),
                ThreePhaseSet.from_array(ms.current[k]),
            )


def report_timestamps(n: int, start_ns: int = 0, rate: int = REPORT_RATE) -> np.ndarray:
    k = np.arange(n, dtype=np.int64)
    return start_ns + (k * 1_000_000_000 * 2 + rate) // (2 * rate)


def _frame_states(model: FeederModel, events: Sequence[Event], t: np.ndarray):
    """Per-frame topology key, bus load scale and source multiplier from events."""
    n = t.size
    switch_ids = [sw.id for sw in model.switches]
    status0 = tuple(sw.closed for sw in model.switches)
    keys: list[tuple] = []
    states: dict[tuple, int] = {}
    topo = np.empty(n, dtype=int)
    bus_step = {}
    source_mult = np.ones(n)
    for ev in events:
        mask = t >= ev.time
        p = ev.params
        if ev.kind == "load_step":
            bus_step.setdefault(p["bus"], np.ones(n))
            bus_step[p["bus"]][mask] *= float(p["scale"])
        elif ev.kind == "sag":
            active = mask & (t < ev.time + float(p["duration"]))
            source_mult[active] *= 1.0 - float(p["depth"])
        elif ev.kind == "oscillation":
            end = ev.time + float(p.get("duration", math.inf))
            active = mask & (t < end)
            phase = 2 * math.pi * float(p["frequency"]) * (t[active] - ev.time)
            source_mult[active] *= 1.0 + float(p["amplitude"]) * np.sin(phase)
    for k in range(n):
        status = list(status0)
        faults = []
        for ev in events:
            if ev.time > t[k]:
                break
            p = ev.params
            if ev.kind == "switch_toggle":
                j = switch_ids.index(p["branch"])
                status[j] = not status[j]
            elif ev.kind == "bolted_fault":
                dur = float(p.get("duration", math.inf))
                if t[k] < ev.time + dur:
                    faults.append(
                        (
                            p["branch"],
                            float(p["distance_fraction"]),
                            str(p["phases"]),
                            float(p.get("resistance", DEFAULT_FAULT_RESISTANCE)),
                        )
                    )
        key = (tuple(status), tuple(faults))
        if key not in states:
            states[key] = len(keys)
            keys.append(key)
        topo[k] = states[key]
    return keys, topo, bus_step, source_mult


def _model_for_state(model: FeederModel, key) -> FeederModel:
    status, faults = key
    m = model.with_switches(list(status)) if model.switches else model
    for n_f, (branch, d, phases, r) in enumerate(faults):
        m = m.with_fault(branch, d, phases, r, fault_bus=f"{branch}@fault{n_f}")
    return m


def simulate_telemetry(
    model: FeederModel,
    load_profiles: LoadProfiles | None = None,
    noise: NoiseModel | None = None,
    events: Sequence[Event] = (),
    duration: float = 1.0,
    *,
    start_ns: int = 0,
    rate: int = REPORT_RATE,
) -> Telemetry:
    """Solve the feeder at every report instant and sample every meter.

    Deterministic for a fixed noise seed. A failed solve marks its frames as
    gaps (NaN values) instead of aborting the run.
    """
    if duration <= 0:
        raise ValidationError("duration must be positive")
    noise = noise or NoiseModel()
    load_profiles = load_profiles or LoadProfiles()
    events = sorted(events, key=lambda e: e.time)
    validate_events(model, events, duration)
    n = int(round(duration * rate))
    if n < 1:
        raise ValidationError("duration shorter than one report interval")
    length = load_profiles.length()
    if length is not None and length < n:
        raise ValidationError(f"load profiles cover {length} reports, run needs {n}")
    for bus in load_profiles.bus_scale:
        model.bus_index(bus)

    timestamps = report_timestamps(n, start_ns, rate)
    t = np.arange(n) / rate
    keys, topo, bus_step, source_mult = _frame_states(model, events, t)

    base_values = np.array([ld.value for ld in model.loads], dtype=complex).reshape(len(model.loads), 3)
    load_values = np.broadcast_to(base_values, (n, len(model.loads), 3)).copy()
    for li, ld in enumerate(model.loads):
        scale = np.ones((n, 3))
        if ld.bus in load_profiles.bus_scale:
            s = np.asarray(load_profiles.bus_scale[ld.bus], dtype=float)[:n]
            scale = scale * (s if s.ndim == 2 else s[:, None])
        if ld.bus in bus_step:
            scale = scale * bus_step[ld.bus][:, None]
        load_values[:, li] *= scale
    src = np.broadcast_to(model.source_voltage, (n, 3)).astype(complex)
    if load_profiles.source_scale is not None:
        src = src * np.asarray(load_profiles.source_scale)[:n]
    src = src * source_mult[:, None]

    truth_v = {m.id: np.full((n, 3), np.nan + 0j) for m in model.meters}
    truth_i = {m.id: np.full((n, 3), np.nan + 0j) for m in model.meters}
    gap = np.zeros(n, dtype=bool)
    reasons: dict[int, str] = {}
    for s_idx, key in enumerate(keys):
        rows = np.nonzero(topo == s_idx)[0]
        try:
            m_state = _model_for_state(model, key)
            sol = solve_power_flow(m_state, load_values=load_values[rows], source_voltage=src[rows])
        except ComputationError as exc:
            gap[rows] = True
            reasons[s_idx] = f"{type(exc).__name__}: {exc}"
            continue
        for m in model.meters:
            v, i = sol.meter_reading(m.id)
            truth_v[m.id][rows] = v
            truth_i[m.id][rows] = i

    rng = np.random.default_rng(noise.seed)
    meters = {}
    truth = {}
    for m in model.meters:
        vb = model.bus_base(m.bus)
        ib = model.current_base(m.bus)
        v_noisy = _add_noise(truth_v[m.id], noise, vb, rng) * (1.0 + noise.pt_ratio_error)
        i_noisy = _add_noise(truth_i[m.id], noise, ib, rng) * (1.0 + noise.ct_ratio_error)
        meters[m.id] = MeterStream(m.id, m.bus, v_noisy, i_noisy, vb, ib)
        truth[m.id] = MeterStream(m.id, m.bus, truth_v[m.id], truth_i[m.id], vb, ib)
    states = [
        {"switches": dict(zip([sw.id for sw in model.switches], k[0])), "faults": [list(f) for f in k[1]]}
        for k in keys
    ]
    return Telemetry(timestamps, meters, truth, gap, reasons, topo, states)


def _add_noise(x: np.ndarray, noise: NoiseModel, base: float, rng: np.random.Generator) -> np.ndarray:
    shape = x.shape
    mag_noise = rng.normal(0.0, 1.0, shape) * (noise.magnitude_sigma_pu * base)
    ang_noise = rng.normal(0.0, 1.0, shape) * noise.angle_sigma
    if noise.magnitude_sigma_pu == 0 and noise.angle_sigma == 0:
        return x.copy()
    mag = np.abs(x)
    live = mag > 0
    out = x.copy()
    new_mag = np.maximum(mag + mag_noise, 0.0)
    new = new_mag * np.exp(1j * (np.angle(x) + ang_noise))
    out[live] = new[live]
    return out


def point_on_wave(phasors: np.ndarray, samples_per_cycle: int = 512) -> np.ndarray:
    """Instantaneous waveform, one nominal cycle per phasor (RMS convention).

    phasors: (T,) complex. Returns (T * samples_per_cycle,) samples.
    """
    phasors = np.asarray(phasors, dtype=complex)
    wt = 2 * math.pi * np.arange(samples_per_cycle) / samples_per_cycle
    wave = math.sqrt(2.0) * np.abs(phasors)[:, None] * np.cos(wt[None, :] + np.angle(phasors)[:, None])
    return wave.reshape(-1)


def constant_load(bus: str, p: Sequence[float], q: Sequence[float] = (0, 0, 0)) -> Load:
    return Load(bus, np.asarray(p, dtype=float) + 1j * np.asarray(q, dtype=float))
