"""Three-phase unbalanced feeder description.

All electrical quantities are physical (volts line-to-neutral, amperes, ohms,
volt-amperes per phase). Per-unit bases are derived per voltage level: the
source level uses ``v_base``; a delta-wye transformer's low side uses
``sqrt(3) * v_base_high / n_t`` so that a rated ``n_t`` maps rated voltage to
1 p.u. on both sides.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, Union

import numpy as np

from ..errors import InvalidRatio, ModelViolation, NotFound, ValidationError

SYMMETRY_TOL = 1e-12

_RATIO_PATTERN = np.array([[1.0, 0.0, -1.0], [-1.0, 1.0, 0.0], [0.0, -1.0, 1.0]])


def transformer_ratio_matrix(n_t: float) -> np.ndarray:
    """Delta / grounded-wye voltage ratio matrix A_t for a step-down unit."""
    if not (isinstance(n_t, (int, float)) and math.isfinite(n_t) and n_t > 0):
        raise InvalidRatio(f"transformer ratio must be positive, got {n_t!r}")
    return _RATIO_PATTERN / float(n_t)


def _as_matrix(z, name: str) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    if z.shape[-2:] != (3, 3):
        raise ModelViolation(f"{name}: impedance must be 3x3, got shape {z.shape}")
    return z


def check_symmetric(z: np.ndarray, name: str = "impedance") -> None:
    scale = max(1.0, float(np.max(np.abs(z))))
    if np.max(np.abs(z - np.swapaxes(z, -1, -2))) > SYMMETRY_TOL * scale:
        raise ModelViolation(f"{name} must be symmetric")


@dataclass(frozen=True, eq=False)
class LineBranch:
    id: str
    from_bus: str
    to_bus: str
    z: np.ndarray  # (..., 3, 3) ohms; a leading batch axis is allowed

    def __post_init__(self):
        z = _as_matrix(self.z, self.id)
        check_symmetric(z, f"line {self.id}")
        if np.any(np.diagonal(z, axis1=-2, axis2=-1).real < 0):
            raise ModelViolation(f"line {self.id}: negative series resistance")
        object.__setattr__(self, "z", z)


@dataclass(frozen=True, eq=False)
class TransformerBranch:
    """Delta (from, high side) to grounded wye (to, low side)."""

    id: str
    from_bus: str
    to_bus: str
    n_t: float
    z_abc: np.ndarray  # 3x3 diagonal, ohms referred to the low side

    def __post_init__(self):
        transformer_ratio_matrix(self.n_t)
        z = _as_matrix(self.z_abc, self.id)
        off = z - np.diag(np.diagonal(z))
        if np.any(off != 0):
            raise ModelViolation(f"transformer {self.id}: impedance must be diagonal")
        object.__setattr__(self, "z_abc", z)

    @property
    def a_t(self) -> np.ndarray:
        return transformer_ratio_matrix(self.n_t)


@dataclass(frozen=True)
class SwitchBranch:
    id: str
    from_bus: str
    to_bus: str
    closed: bool = True

    @property
    def status(self) -> str:
        return "closed" if self.closed else "open"


Branch = Union[LineBranch, TransformerBranch, SwitchBranch]


@dataclass(frozen=True, eq=False)
class Load:
    """Wye-connected per-phase load. ``kind`` is ``"power"`` (VA drawn) or
    ``"current"`` (fixed complex phasor current drawn). Negative real power
    models generation."""

    bus: str
    value: np.ndarray
    kind: str = "power"

    def __post_init__(self):
        if self.kind not in ("power", "current"):
            raise ValidationError(f"load kind must be 'power' or 'current', got {self.kind!r}")
        v = np.asarray(self.value, dtype=complex)
        if v.shape != (3,):
            raise ValidationError(f"load at {self.bus} needs three per-phase values")
        object.__setattr__(self, "value", v)


@dataclass(frozen=True, eq=False)
class Shunt:
    """Constant admittance to ground per phase (siemens), used for faults."""

    bus: str
    y: np.ndarray  # (..., 3)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=complex)
        if y.shape[-1:] != (3,):
            raise ValidationError(f"shunt at {self.bus} needs three per-phase admittances")
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class Meter:
    """A uPMU at ``bus``. Current is read from ``branch`` at ``end`` when set;
    otherwise the bus's load draw (or, at the source, the total injection)."""

    id: str
    bus: str
    branch: str | None = None
    end: str = "from"

    def __post_init__(self):
        if self.end not in ("from", "to"):
            raise ValidationError(f"meter {self.id}: end must be 'from' or 'to'")


def balanced_voltages(v_ln: float, angle: float = 0.0) -> np.ndarray:
    return v_ln * np.exp(1j * (angle + np.array([0.0, -2.0 * math.pi / 3, 2.0 * math.pi / 3])))


@dataclass(frozen=True, eq=False)
class FeederModel:
    buses: tuple[str, ...]
    source_bus: str
    v_base: float  # line-to-neutral volts at the source level
    branches: tuple[Branch, ...] = ()
    loads: tuple[Load, ...] = ()
    meters: tuple[Meter, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    s_base: float = 1e6  # three-phase VA
    source_voltage: np.ndarray | None = None  # defaults to balanced 1 p.u.
    _bases: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "loads", tuple(self.loads))
        object.__setattr__(self, "meters", tuple(self.meters))
        object.__setattr__(self, "shunts", tuple(self.shunts))
        if len(set(self.buses)) != len(self.buses):
            raise ValidationError("duplicate bus identifiers")
        known = set(self.buses)
        if self.source_bus not in known:
            raise ValidationError(f"source bus {self.source_bus!r} is not a bus")
        if not self.v_base > 0 or not self.s_base > 0:
            raise ValidationError("voltage and power bases must be positive")
        ids = [b.id for b in self.branches]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate branch identifiers")
        for b in self.branches:
            for end in (b.from_bus, b.to_bus):
                if end not in known:
                    raise ValidationError(f"branch {b.id} references unknown bus {end!r}")
            if b.from_bus == b.to_bus:
                raise ValidationError(f"branch {b.id} is a self-loop")
        for item in (*self.loads, *self.shunts, *self.meters):
            if item.bus not in known:
                raise ValidationError(f"unknown bus {item.bus!r}")
        branch_ids = set(ids)
        mids = [m.id for m in self.meters]
        if len(set(mids)) != len(mids):
            raise ValidationError("duplicate meter identifiers")
        for m in self.meters:
            if m.branch is not None:
                if m.branch not in branch_ids:
                    raise ValidationError(f"meter {m.id} references unknown branch {m.branch!r}")
        if self.source_voltage is None:
            object.__setattr__(self, "source_voltage", balanced_voltages(self.v_base))
        else:
            sv = np.asarray(self.source_voltage, dtype=complex)
            if sv.shape != (3,):
                raise ValidationError("source voltage needs three phasors")
            object.__setattr__(self, "source_voltage", sv)
        object.__setattr__(self, "_bases", self._propagate_bases())

    # -- lookups ---------------------------------------------------------
    def bus_index(self, bus: str) -> int:
        try:
            return self.buses.index(bus)
        except ValueError:
            raise NotFound(f"unknown bus {bus!r}") from None

    def branch(self, branch_id: str) -> Branch:
        for b in self.branches:
            if b.id == branch_id:
                return b
        raise NotFound(f"unknown branch {branch_id!r}")

    def branch_index(self, branch_id: str) -> int:
        for k, b in enumerate(self.branches):
            if b.id == branch_id:
                return k
        raise NotFound(f"unknown branch {branch_id!r}")

    def meter(self, meter_id: str) -> Meter:
        for m in self.meters:
            if m.id == meter_id:
                return m
        raise NotFound(f"unknown meter {meter_id!r}")

    @property
    def switches(self) -> tuple[SwitchBranch, ...]:
        return tuple(b for b in self.branches if isinstance(b, SwitchBranch))

    @property
    def lines(self) -> tuple[LineBranch, ...]:
        return tuple(b for b in self.branches if isinstance(b, LineBranch))

    def bus_base(self, bus: str) -> float:
        """Line-to-neutral voltage base at ``bus``."""
        try:
            return self._bases[bus]
        except KeyError:
            raise NotFound(f"unknown bus {bus!r}") from None

    def current_base(self, bus: str) -> float:
        return self.s_base / 3.0 / self.bus_base(bus)

    @property
    def phase_power_base(self) -> float:
        return self.s_base / 3.0

    def _propagate_bases(self) -> dict[str, float]:
        bases = {self.source_bus: float(self.v_base)}
        queue = deque([self.source_bus])
        while queue:
            bus = queue.popleft()
            for b in self.branches:
                if b.from_bus == bus:
                    other = b.to_bus
                    if isinstance(b, TransformerBranch):
                        base = math.sqrt(3.0) * bases[bus] / b.n_t
                    else:
                        base = bases[bus]
                elif b.to_bus == bus:
                    other = b.from_bus
                    if isinstance(b, TransformerBranch):
                        base = bases[bus] * b.n_t / math.sqrt(3.0)
                    else:
                        base = bases[bus]
                else:
                    continue
                if other not in bases:
                    bases[other] = base
                    queue.append(other)
        for bus in self.buses:
            bases.setdefault(bus, float(self.v_base))
        return bases

    # -- derived models ----------------------------------------------------
    def with_switches(self, status: dict[str, bool] | Sequence[bool]) -> "FeederModel":
        """Copy with switch states replaced (dict by id, or a vector in switch order)."""
        if not isinstance(status, dict):
            status = {sw.id: bool(s) for sw, s in zip(self.switches, status, strict=True)}
        for key in status:
            if not isinstance(self.branch(key), SwitchBranch):
                raise ValidationError(f"branch {key!r} is not a switch")
        branches = tuple(
            replace(b, closed=bool(status[b.id])) if isinstance(b, SwitchBranch) and b.id in status else b
            for b in self.branches
        )
        return replace(self, branches=branches, _bases=None)

    def with_loads(self, loads: Iterable[Load]) -> "FeederModel":
        return replace(self, loads=tuple(loads), _bases=None)

    def with_fault(
        self,
        branch_id: str,
        distance_fraction: float,
        phases: str = "abc",
        resistance: float = 1e-3,
        fault_bus: str | None = None,
    ) -> "FeederModel":
        """Split a line at ``distance_fraction`` and add a resistive shunt to
        ground on ``phases`` at the new internal bus.

        ``distance_fraction`` may be an array to build a batch of fault
        positions; the two sub-line impedances then carry a leading axis.
        """
        line = self.branch(branch_id)
        if not isinstance(line, LineBranch):
            raise ValidationError(f"faults can only be placed on lines, {branch_id!r} is not one")
        d = np.asarray(distance_fraction, dtype=float)
        if np.any(d < 0) or np.any(d > 1):
            raise ValidationError("distance fraction must lie in [0, 1]")
        if not resistance > 0:
            raise ValidationError("fault resistance must be positive")
        bad = set(phases) - set("abc")
        if bad or not phases:
            raise ValidationError(f"fault phases must be drawn from 'abc', got {phases!r}")
        fb = fault_bus or f"{branch_id}@fault"
        dz = d[..., None, None]
        first = LineBranch(f"{branch_id}#1", line.from_bus, fb, dz * line.z)
        second = LineBranch(f"{branch_id}#2", fb, line.to_bus, (1.0 - dz) * line.z)
        branches = []
        for b in self.branches:
            if b.id == branch_id:
                branches.extend([first, second])
            else:
                branches.append(b)
        y = np.array([1.0 / resistance if p in phases else 0.0 for p in "abc"], dtype=complex)
        meters = tuple(
            replace(m, branch=f"{branch_id}#1" if m.end == "from" else f"{branch_id}#2")
            if m.branch == branch_id
            else m
            for m in self.meters
        )
        return replace(
            self,
            buses=(*self.buses, fb),
            branches=tuple(branches),
            shunts=(*self.shunts, Shunt(fb, y)),
            meters=meters,
            _bases=None,
        )

    def to_pu_voltage(self, bus: str, v: np.ndarray) -> np.ndarray:
        return np.asarray(v) / self.bus_base(bus)
