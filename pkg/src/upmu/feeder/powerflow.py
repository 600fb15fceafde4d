"""Radial three-phase forward-backward sweep.

The backward pass reduces every subtree to a driving-point relation
``I_in = Y_eq V + J_eq`` seen from its parent branch, which folds constant
admittance shunts (faults) in exactly; the forward pass then propagates
voltages from the source. Voltage-dependent loads are re-linearised into
current injections between sweeps until the largest voltage update drops
below ``tol`` per unit.

Everything carries a leading batch axis so many operating points (report
instants, fault candidates) solve in one call.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..errors import Diverged, ModelViolation, NotRadial, ValidationError
from .model import FeederModel, LineBranch, SwitchBranch, TransformerBranch

# Constant-power loads fall back to constant impedance below this voltage (p.u.)
LOW_VOLTAGE_PU = 0.7

_EYE = np.eye(3)


@dataclass(frozen=True)
class Tree:
    order: tuple[int, ...]  # energized bus indices, parents before children
    parent_branch: dict[int, tuple[int, int, bool]]  # child -> (branch idx, parent idx, forward)
    children: dict[int, list[int]]
    energized: np.ndarray  # bool per bus


def radial_tree(model: FeederModel) -> Tree:
    """Energized tree reachable from the source through closed branches."""
    n = len(model.buses)
    idx = {b: k for k, b in enumerate(model.buses)}
    adj: dict[int, list[tuple[int, int, bool]]] = {k: [] for k in range(n)}
    for bi, br in enumerate(model.branches):
        if isinstance(br, SwitchBranch) and not br.closed:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        adj[f].append((bi, t, True))
        adj[t].append((bi, f, False))
    src = idx[model.source_bus]
    seen = {src}
    order = [src]
    parent_branch: dict[int, tuple[int, int, bool]] = {}
    children: dict[int, list[int]] = {k: [] for k in range(n)}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for bi, v, forward in adj[u]:
            if u in parent_branch and parent_branch[u][0] == bi:
                continue
            if v in seen:
                raise NotRadial(
                    f"closed branches form a loop through {model.buses[u]!r} and {model.buses[v]!r}"
                )
            br = model.branches[bi]
            if isinstance(br, TransformerBranch) and not forward:
                raise ModelViolation(f"transformer {br.id} would be fed from its low side")
            seen.add(v)
            order.append(v)
            parent_branch[v] = (bi, u, forward)
            children[u].append(v)
            queue.append(v)
    energized = np.zeros(n, dtype=bool)
    energized[list(seen)] = True
    return Tree(tuple(order), parent_branch, children, energized)


@dataclass(frozen=True)
class PowerFlowSolution:
    model: FeederModel
    voltages: np.ndarray  # (B, n_bus, 3) complex volts
    branch_from: np.ndarray  # (B, n_branch, 3) current entering each branch at from_bus
    branch_to: np.ndarray  # (B, n_branch, 3) current leaving each branch at to_bus
    load_current: np.ndarray  # (B, n_bus, 3) drawn by loads
    shunt_current: np.ndarray  # (B, n_bus, 3) drawn by shunts
    energized: np.ndarray
    iterations: int

    @property
    def batch(self) -> int:
        return self.voltages.shape[0]

    def voltage(self, bus: str) -> np.ndarray:
        return self.voltages[:, self.model.bus_index(bus)]

    def current(self, branch_id: str, end: str = "from") -> np.ndarray:
        k = self.model.branch_index(branch_id)
        return (self.branch_from if end == "from" else self.branch_to)[:, k]

    def source_injection(self) -> np.ndarray:
        src = self.model.source_bus
        total = self.load_current[:, self.model.bus_index(src)] + self.shunt_current[:, self.model.bus_index(src)]
        for k, br in enumerate(self.model.branches):
            if br.from_bus == src:
                total = total + self.branch_from[:, k]
            elif br.to_bus == src:
                total = total - self.branch_to[:, k]
        return total

    def meter_reading(self, meter_id: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.model.meter(meter_id)
        v = self.voltage(m.bus)
        if m.branch is not None:
            i = self.current(m.branch, m.end)
        elif m.bus == self.model.source_bus:
            i = self.source_injection()
        else:
            k = self.model.bus_index(m.bus)
            i = self.load_current[:, k] + self.shunt_current[:, k]
        return v, i


def _load_current(kind_power: np.ndarray, values: np.ndarray, v: np.ndarray, v_thr: np.ndarray) -> np.ndarray:
    """Per-load current drawn at voltage ``v``.

    values, v: (B, L, 3); kind_power: (L,) bool; v_thr: (L,) volts.
    """
    out = np.array(values, dtype=complex, copy=True)
    if np.any(kind_power):
        vp = v[:, kind_power]
        sp = values[:, kind_power]
        thr = v_thr[kind_power][None, :, None]
        mag = np.abs(vp)
        high = mag >= thr
        with np.errstate(divide="ignore", invalid="ignore"):
            i_high = np.conj(sp / np.where(high, vp, 1.0))
        i_low = np.conj(sp) * vp / thr**2
        out[:, kind_power] = np.where(high, i_high, i_low)
    return out


def solve_power_flow(
    model: FeederModel,
    *,
    load_values: np.ndarray | None = None,
    source_voltage: np.ndarray | None = None,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> PowerFlowSolution:
    """Solve the energized radial subgraph of ``model``.

    ``load_values`` overrides the model's load values with shape
    ``(B, n_loads, 3)``; ``source_voltage`` overrides the source phasors with
    shape ``(B, 3)``. Line impedances and shunt admittances may also carry a
    batch axis. Raises :class:`NotRadial` or :class:`Diverged`.
    """
    tree = radial_tree(model)
    n_bus = len(model.buses)
    n_br = len(model.branches)
    loads = model.loads
    n_load = len(loads)

    if load_values is None:
        load_values = np.array([ld.value for ld in loads], dtype=complex).reshape(1, n_load, 3)
    else:
        load_values = np.asarray(load_values, dtype=complex)
        if load_values.ndim == 2:
            load_values = load_values[None]
        if load_values.shape[1:] != (n_load, 3):
            raise ValidationError(f"load_values must have shape (B, {n_load}, 3)")
    if source_voltage is None:
        source_voltage = model.source_voltage[None, :]
    else:
        source_voltage = np.asarray(source_voltage, dtype=complex)
        if source_voltage.ndim == 1:
            source_voltage = source_voltage[None, :]

    batch_shapes = [load_values.shape[0], source_voltage.shape[0]]
    for br in model.branches:
        if isinstance(br, LineBranch) and br.z.ndim == 3:
            batch_shapes.append(br.z.shape[0])
    for sh in model.shunts:
        if sh.y.ndim == 2:
            batch_shapes.append(sh.y.shape[0])
    B = max(batch_shapes)
    for s in batch_shapes:
        if s not in (1, B):
            raise ValidationError(f"inconsistent batch sizes {sorted(set(batch_shapes))}")

    load_values = np.broadcast_to(load_values, (B, n_load, 3))
    source_voltage = np.broadcast_to(source_voltage, (B, 3))

    bases = np.array([model.bus_base(b) for b in model.buses])
    load_bus = np.array([model.bus_index(ld.bus) for ld in loads], dtype=int)
    kind_power = np.array([ld.kind == "power" for ld in loads], dtype=bool)
    v_thr = LOW_VOLTAGE_PU * bases[load_bus] if n_load else np.zeros(0)
    load_live = tree.energized[load_bus] if n_load else np.zeros(0, dtype=bool)

    y_sh = np.zeros((B, n_bus, 3), dtype=complex)
    for sh in model.shunts:
        k = model.bus_index(sh.bus)
        if tree.energized[k]:
            y_sh[:, k] += np.broadcast_to(sh.y, (B, 3))

    src = model.bus_index(model.source_bus)

    # per-branch static data
    z_of: dict[int, np.ndarray] = {}
    a_of: dict[int, np.ndarray] = {}
    for bi, br in enumerate(model.branches):
        if isinstance(br, LineBranch):
            z_of[bi] = np.broadcast_to(br.z, (B, 3, 3))
        elif isinstance(br, TransformerBranch):
            z_of[bi] = np.broadcast_to(br.z_abc, (B, 3, 3))
            a_of[bi] = br.a_t

    def sweep(j_bus: np.ndarray):
        y_eq = np.zeros((B, n_bus, 3, 3), dtype=complex)
        j_eq = np.zeros((B, n_bus, 3), dtype=complex)
        m_of: dict[int, np.ndarray] = {}
        for k in reversed(tree.order):
            y_eq[:, k] += y_sh[:, k, :, None] * _EYE
            j_eq[:, k] += j_bus[:, k]
            if k == src:
                continue
            bi, p, _ = tree.parent_branch[k]
            br = model.branches[bi]
            yc, jc = y_eq[:, k], j_eq[:, k]
            if isinstance(br, SwitchBranch):
                y_eq[:, p] += yc
                j_eq[:, p] += jc
                continue
            m = np.linalg.inv(_EYE + yc @ z_of[bi])
            m_of[k] = m
            my = m @ yc
            mj = np.einsum("bij,bj->bi", m, jc)
            if isinstance(br, TransformerBranch):
                a = a_of[bi]
                y_eq[:, p] += a.T @ my @ a
                j_eq[:, p] += np.einsum("ij,bj->bi", a.T, mj)
            else:
                y_eq[:, p] += my
                j_eq[:, p] += mj

        v = np.zeros((B, n_bus, 3), dtype=complex)
        i_from = np.zeros((B, n_br, 3), dtype=complex)
        i_to = np.zeros((B, n_br, 3), dtype=complex)
        v[:, src] = source_voltage
        for k in tree.order:
            if k == src:
                continue
            bi, p, forward = tree.parent_branch[k]
            br = model.branches[bi]
            vp = v[:, p]
            yc, jc = y_eq[:, k], j_eq[:, k]
            if isinstance(br, SwitchBranch):
                v[:, k] = vp
                i_down = np.einsum("bij,bj->bi", yc, vp) + jc
                i_up = i_down
            elif isinstance(br, TransformerBranch):
                a = a_of[bi]
                va = np.einsum("ij,bj->bi", a, vp)
                i_down = np.einsum("bij,bj->bi", m_of[k], np.einsum("bij,bj->bi", yc, va) + jc)
                v[:, k] = va - np.einsum("bij,bj->bi", z_of[bi], i_down)
                i_up = np.einsum("ij,bj->bi", a.T, i_down)
            else:
                i_down = np.einsum("bij,bj->bi", m_of[k], np.einsum("bij,bj->bi", yc, vp) + jc)
                v[:, k] = vp - np.einsum("bij,bj->bi", z_of[bi], i_down)
                i_up = i_down
            if forward:
                i_from[:, bi], i_to[:, bi] = i_up, i_down
            else:
                # declared from_bus is downstream: flip to declared orientation
                i_from[:, bi], i_to[:, bi] = -i_down, -i_up
        return v, i_from, i_to

    def injections(v: np.ndarray):
        per_load = np.zeros((B, n_load, 3), dtype=complex)
        if n_load:
            per_load = _load_current(kind_power, load_values, v[:, load_bus], v_thr)
            per_load[:, ~load_live] = 0.0
        j_bus = np.zeros((B, n_bus, 3), dtype=complex)
        np.add.at(j_bus, (slice(None), load_bus), per_load)
        return j_bus

    voltage_dependent = bool(np.any(kind_power & load_live)) if n_load else False
    j_bus = np.zeros((B, n_bus, 3), dtype=complex)
    v, i_from, i_to = sweep(j_bus)
    iterations = 0
    if n_load:
        while True:
            iterations += 1
            j_bus = injections(v)
            v_new, i_from, i_to = sweep(j_bus)
            change = np.max(np.abs(v_new - v) / bases[None, :, None]) if n_bus else 0.0
            v = v_new
            if not voltage_dependent or change < tol:
                break
            if iterations >= max_iter or not np.isfinite(change):
                raise Diverged(f"sweep did not converge in {max_iter} iterations (last update {change:.3g} p.u.)")
    # j_bus is the injection the last sweep used, so KCL holds exactly
    shunt_current = y_sh * v
    return PowerFlowSolution(
        model=model,
        voltages=v,
        branch_from=i_from,
        branch_to=i_to,
        load_current=j_bus,
        shunt_current=shunt_current,
        energized=tree.energized,
        iterations=max(iterations, 1),
    )
