"""Distribution state estimation from sparse uPMU data and load pseudo-measurements.

The state is the per-bus, per-phase complex voltage in per unit (rectangular
coordinates). Buses tied by closed switches share one state node; buses not
energized from the source are excluded and reported as zero.

Meter voltages and currents are linear in the state through the bus
admittance matrix. Load pseudo-measurements (VA) are linear only after
fixing the voltage, which the Bayesian estimator does at the no-load
operating point; the WLS baseline keeps them nonlinear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import Diverged, NumericallySingular, Unobservable, ValidationError
from ..feeder.model import FeederModel, LineBranch, SwitchBranch, TransformerBranch, transformer_ratio_matrix
from ..feeder.powerflow import radial_tree, solve_power_flow
from ..feeder.telemetry import DEFAULT_ANGLE_SIGMA, DEFAULT_MAGNITUDE_SIGMA_PU
from ..phasor import ThreePhaseSet, wrap_angles
from .common import rect_covariance

DEFAULT_PRIOR_SIGMA_PU = 0.1
DEFAULT_PSEUDO_SIGMA = 0.5  # relative to the pseudo value
ZERO_INJECTION_SIGMA_PU = 1e-6
_FLOOR_PU = 1e-6


@dataclass
class Measurements:
    """One snapshot of inputs to the estimators (physical units).

    voltages: bus -> (3,) complex volts.
    currents: meter id -> (3,) complex amperes, read with the meter's
        convention (branch end current, source injection, or load draw).
    pseudo_loads: bus -> (3,) complex VA drawn at that bus.
    """

    voltages: dict[str, np.ndarray] = field(default_factory=dict)
    currents: dict[str, np.ndarray] = field(default_factory=dict)
    pseudo_loads: dict[str, np.ndarray] = field(default_factory=dict)
    angle_sigma: float = DEFAULT_ANGLE_SIGMA
    magnitude_sigma_pu: float = DEFAULT_MAGNITUDE_SIGMA_PU
    pseudo_sigma: float = DEFAULT_PSEUDO_SIGMA
    zero_injection: bool = True

    @property
    def empty(self) -> bool:
        return not (self.voltages or self.currents or self.pseudo_loads)


@dataclass
class StateEstimate:
    buses: tuple[str, ...]
    voltages: np.ndarray  # (n_bus, 3) complex volts
    std_real: np.ndarray  # (n_bus, 3) posterior std of the real part, volts
    std_imag: np.ndarray
    covariance: np.ndarray  # (2n, 2n) over [Re; Im] of the per-unit state nodes
    iterations: int = 0

    def voltage(self, bus: str) -> ThreePhaseSet:
        return ThreePhaseSet.from_array(self.voltages[self.buses.index(bus)])


class Network:
    """Per-unit bus admittance model of an energized radial feeder."""

    def __init__(self, model: FeederModel):
        self.model = model
        tree = radial_tree(model)
        parent = {b: b for b in model.buses}

        def find(b):
            while parent[b] != b:
                parent[b] = parent[parent[b]]
                b = parent[b]
            return b

        for br in model.branches:
            if isinstance(br, SwitchBranch) and br.closed:
                ra, rb = find(br.from_bus), find(br.to_bus)
                if ra != rb:
                    parent[rb] = ra
        energized = [b for b, e in zip(model.buses, tree.energized) if e]
        roots = []
        for b in model.buses:
            if b in energized and find(b) not in roots:
                roots.append(find(b))
        self.groups = roots
        self.node_of = {b: roots.index(find(b)) for b in model.buses if b in energized}
        self.n = len(roots)
        self.size = 3 * self.n
        self.vbase = np.array([model.bus_base(r) for r in roots])
        self.pbase = model.phase_power_base
        y = np.zeros((self.size, self.size), dtype=complex)
        self.branch_blocks: dict[str, tuple[int, int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}
        for br in model.branches:
            if isinstance(br, SwitchBranch) or br.from_bus not in self.node_of or br.to_bus not in self.node_of:
                continue
            f, t = self.node_of[br.from_bus], self.node_of[br.to_bus]
            if isinstance(br, LineBranch):
                yb = np.linalg.inv(np.asarray(br.z))
                blocks = (yb, -yb, -yb, yb)
            elif isinstance(br, TransformerBranch):
                a = transformer_ratio_matrix(br.n_t)
                yb = np.linalg.inv(np.asarray(br.z_abc))
                blocks = (a.T @ yb @ a, -a.T @ yb, -yb @ a, yb)
            else:  # pragma: no cover
                continue
            # per unit: I_pu = I / ibase(row bus), V = V_pu * vbase(col bus)
            vf, vt = self.vbase[f], self.vbase[t]
            scale = {(0, 0): vf * vf, (0, 1): vf * vt, (1, 0): vt * vf, (1, 1): vt * vt}
            ff, ft, tf, tt = (blk * scale[k] / self.pbase for blk, k in zip(blocks, ((0, 0), (0, 1), (1, 0), (1, 1))))
            sf, st = slice(3 * f, 3 * f + 3), slice(3 * t, 3 * t + 3)
            y[sf, sf] += ff
            y[sf, st] += ft
            y[st, sf] += tf
            y[st, st] += tt
            self.branch_blocks[br.id] = (f, t, ff, ft, tf, tt)
        self.y = y
        noload = model.with_loads([])
        sol = solve_power_flow(noload)
        self.v0 = np.zeros(self.size, dtype=complex)
        for b, k in self.node_of.items():
            self.v0[3 * k : 3 * k + 3] = sol.voltage(b)[0] / self.vbase[k]

    def rows_voltage(self, bus: str) -> np.ndarray:
        k = self._node(bus)
        h = np.zeros((3, self.size), dtype=complex)
        h[:, 3 * k : 3 * k + 3] = np.eye(3)
        return h

    def rows_load_current(self, bus: str) -> np.ndarray:
        """Current drawn by the loads at ``bus`` (minus the net branch outflow)."""
        k = self._node(bus)
        return -self.y[3 * k : 3 * k + 3]

    def rows_meter_current(self, meter_id: str) -> tuple[np.ndarray, int]:
        m = self.model.meter(meter_id)
        if m.branch is not None:
            if m.branch not in self.branch_blocks:
                raise ValidationError(f"meter {meter_id} sits on a branch outside the energized network")
            f, t, ff, ft, tf, tt = self.branch_blocks[m.branch]
            h = np.zeros((3, self.size), dtype=complex)
            if m.end == "from":
                h[:, 3 * f : 3 * f + 3] += ff
                h[:, 3 * t : 3 * t + 3] += ft
                return h, f
            h[:, 3 * f : 3 * f + 3] -= tf
            h[:, 3 * t : 3 * t + 3] -= tt
            return h, t
        k = self._node(m.bus)
        if m.bus == self.model.source_bus:
            return self.y[3 * k : 3 * k + 3].copy(), k
        return self.rows_load_current(m.bus), k

    def _node(self, bus: str) -> int:
        self.model.bus_index(bus)
        if bus not in self.node_of:
            raise ValidationError(f"bus {bus!r} is not energized")
        return self.node_of[bus]

    def to_estimate(self, x: np.ndarray, cov: np.ndarray, iterations: int = 0) -> StateEstimate:
        buses = self.model.buses
        v = np.zeros((len(buses), 3), dtype=complex)
        sr = np.zeros((len(buses), 3))
        si = np.zeros((len(buses), 3))
        d = np.sqrt(np.maximum(np.diag(cov), 0.0))
        for i, b in enumerate(buses):
            if b not in self.node_of:
                continue
            k = self.node_of[b]
            sl = slice(3 * k, 3 * k + 3)
            v[i] = x[sl] * self.vbase[k]
            sr[i] = d[: self.size][sl] * self.vbase[k]
            si[i] = d[self.size :][sl] * self.vbase[k]
        return StateEstimate(buses, v, sr, si, cov, iterations)


# -- measurement assembly ---------------------------------------------------


@dataclass
class _Rows:
    kind: str  # "phasor", "pseudo_load", "zero"
    a: np.ndarray  # (3, n) complex rows, y = a x
    z: np.ndarray  # (3,) complex per-unit measurement
    bus_node: int = -1  # node of the load bus for pseudo rows


def _assemble(net: Network, meas: Measurements) -> list[_Rows]:
    rows = []
    for bus, v in sorted(meas.voltages.items()):
        k = net._node(bus)
        rows.append(_Rows("phasor", net.rows_voltage(bus), np.asarray(v, dtype=complex) / net.vbase[k]))
    for mid, i in sorted(meas.currents.items()):
        a, k = net.rows_meter_current(mid)
        ibase = net.pbase / net.vbase[k]
        rows.append(_Rows("phasor", a, np.asarray(i, dtype=complex) / ibase))
    loaded = set(meas.pseudo_loads)
    for bus, s in sorted(meas.pseudo_loads.items()):
        k = net._node(bus)
        rows.append(_Rows("pseudo_load", net.rows_load_current(bus), np.asarray(s, dtype=complex) / net.pbase, k))
    if meas.zero_injection:
        metered = {net.model.meter(m).bus for m in meas.currents if net.model.meter(m).branch is None}
        load_buses = {ld.bus for ld in net.model.loads}
        src_node = net.node_of[net.model.source_bus]
        done = set()
        for bus, k in net.node_of.items():
            if k == src_node or k in done:
                continue
            members = [b for b, kk in net.node_of.items() if kk == k]
            if any(b in load_buses or b in loaded or b in metered for b in members):
                continue
            done.add(k)
            rows.append(_Rows("zero", net.rows_load_current(bus), np.zeros(3, dtype=complex)))
    return rows


def _realify(a: np.ndarray) -> np.ndarray:
    return np.block([[a.real, -a.imag], [a.imag, a.real]])


def _stack2(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real, z.imag])


# -- Bayesian linear estimator ------------------------------------------------


def linear_state_estimate(
    model: FeederModel,
    measurements: Measurements,
    prior_mean: np.ndarray | None = None,
    prior_cov: np.ndarray | None = None,
    *,
    prior_sigma_pu: float = DEFAULT_PRIOR_SIGMA_PU,
) -> StateEstimate:
    """Gaussian conditioning of a prior over the per-unit state on linear(ised) rows.

    ``prior_mean`` is (n,) complex per unit over the state nodes and
    ``prior_cov`` the (2n, 2n) covariance over [Re; Im]; both default to the
    no-load voltages with independent ``prior_sigma_pu`` spread.
    """
    net = Network(model)
    n = net.size
    mu = net.v0.copy() if prior_mean is None else np.asarray(prior_mean, dtype=complex)
    if mu.shape != (n,):
        raise ValidationError(f"prior mean must have {n} entries")
    sigma = np.eye(2 * n) * prior_sigma_pu**2 if prior_cov is None else np.asarray(prior_cov, dtype=float)
    if sigma.shape != (2 * n, 2 * n):
        raise ValidationError(f"prior covariance must be {2 * n}x{2 * n}")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValidationError("prior covariance must be positive definite") from None
    m0 = _stack2(mu)
    rows = _assemble(net, measurements)
    if not rows:
        return net.to_estimate(mu, sigma)

    h_blocks, z_blocks, r_blocks = [], [], []
    for r in rows:
        if r.kind == "pseudo_load":
            k = r.bus_node
            v0 = net.v0[3 * k : 3 * k + 3]
            zc = np.conj(r.z / v0)  # current drawn by the pseudo load at the no-load voltage
            var = (measurements.pseudo_sigma * np.abs(zc)) ** 2 + _FLOOR_PU**2
            cov = [np.eye(2) * v / 2.0 for v in var]
        elif r.kind == "zero":
            zc = r.z
            cov = [np.eye(2) * ZERO_INJECTION_SIGMA_PU**2 / 2.0] * 3
        else:
            zc = r.z
            cov = [rect_covariance(zz, 1.0, measurements.angle_sigma, measurements.magnitude_sigma_pu) for zz in zc]
        h_blocks.append(r.a)
        z_blocks.append(zc)
        r_blocks.append(cov)
    a = np.vstack(h_blocks)
    z = np.concatenate(z_blocks)
    m = a.shape[0]
    h = _realify(a)
    rr = np.zeros((2 * m, 2 * m))
    covs = [c for blk in r_blocks for c in blk]
    for i, c in enumerate(covs):
        idx = [i, m + i]
        rr[np.ix_(idx, idx)] = c
    sh = sigma @ h.T
    s = h @ sh + rr
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise NumericallySingular("innovation covariance is not positive definite") from None
    if np.min(np.diag(chol)) ** 2 <= np.finfo(float).eps * np.max(np.diag(s)):
        raise NumericallySingular("innovation covariance is numerically singular")
    innov = _stack2(z) - h @ m0
    gain_t = np.linalg.solve(chol.T, np.linalg.solve(chol, sh.T))  # S^-1 H Sigma
    x = m0 + gain_t.T @ innov
    post = sigma - sh @ gain_t
    post = (post + post.T) / 2.0
    return net.to_estimate(x[:n] + 1j * x[n:], post)


# -- nonlinear WLS baseline ---------------------------------------------------------


def _wls_terms(net: Network, rows: list[_Rows], meas: Measurements, x: np.ndarray):
    """Residual vector, Jacobian over [Re; Im] and weights at state ``x``."""
    n = net.size
    res, jac, w = [], [], []
    for r in rows:
        y = r.a @ x
        if r.kind == "phasor":
            for p in range(3):
                zp, yp, ap = r.z[p], y[p], r.a[p]
                if abs(zp) < _FLOOR_PU or abs(yp) < _FLOOR_PU:
                    sig2 = meas.magnitude_sigma_pu**2 + (meas.angle_sigma * abs(zp)) ** 2
                    res += [zp.real - yp.real, zp.imag - yp.imag]
                    jac += [np.concatenate([ap.real, -ap.imag]), np.concatenate([ap.imag, ap.real])]
                    w += [1.0 / max(sig2, _FLOOR_PU**2)] * 2
                    continue
                mag = abs(yp)
                res.append(abs(zp) - mag)
                g = np.conj(yp) * ap / mag
                jac.append(np.concatenate([g.real, -g.imag]))
                w.append(1.0 / max(meas.magnitude_sigma_pu**2, _FLOOR_PU**2))
                res.append(float(wrap_angles(np.angle(zp) - np.angle(yp))))
                q = ap / yp
                jac.append(np.concatenate([q.imag, q.real]))
                w.append(1.0 / max(meas.angle_sigma**2, _FLOOR_PU**2))
        elif r.kind == "pseudo_load":
            k = r.bus_node
            sl = slice(3 * k, 3 * k + 3)
            v = x[sl]
            load = y  # current drawn at the bus
            s = v * np.conj(load)
            e = np.zeros((3, n), dtype=complex)
            e[:, sl] = np.eye(3)
            ds_de = np.conj(load)[:, None] * e + v[:, None] * np.conj(r.a)
            ds_df = 1j * np.conj(load)[:, None] * e - 1j * v[:, None] * np.conj(r.a)
            sig = meas.pseudo_sigma * np.abs(r.z) + _FLOOR_PU
            for p in range(3):
                res += [r.z[p].real - s[p].real, r.z[p].imag - s[p].imag]
                jac += [np.concatenate([ds_de[p].real, ds_df[p].real]), np.concatenate([ds_de[p].imag, ds_df[p].imag])]
                w += [1.0 / sig[p] ** 2] * 2
        else:
            for p in range(3):
                ap = r.a[p]
                res += [-y[p].real, -y[p].imag]
                jac += [np.concatenate([ap.real, -ap.imag]), np.concatenate([ap.imag, ap.real])]
                w += [1.0 / ZERO_INJECTION_SIGMA_PU**2] * 2
    return np.array(res), np.array(jac).reshape(len(res), 2 * n), np.array(w)


def wls_state_estimate(
    model: FeederModel,
    measurements: Measurements,
    weights: Mapping[str, float] | None = None,
    *,
    tol: float = 1e-9,
    max_iter: int = 50,
) -> StateEstimate:
    """Gauss-Newton weighted least squares on polar phasor and P/Q pseudo rows.

    ``weights`` optionally scales the default inverse-variance weights per
    row kind ("phasor", "pseudo_load", "zero").
    """
    net = Network(model)
    n = net.size
    rows = _assemble(net, measurements)
    if not rows or measurements.empty:
        raise Unobservable("no measurements")
    scale_by_kind = dict(weights or {})
    # every row group contributes six real rows (three phases, two parts each)
    kind_scale = np.repeat([scale_by_kind.get(r.kind, 1.0) for r in rows], 6)
    x = net.v0.copy()
    res, jac, w = _wls_terms(net, rows, measurements, x)
    w = w * kind_scale
    sw = np.sqrt(w)
    if np.linalg.matrix_rank(jac * sw[:, None]) < 2 * n:
        raise Unobservable(f"measurement Jacobian rank below the {2 * n} state variables")
    for it in range(1, max_iter + 1):
        a = jac * sw[:, None]
        try:
            dx, *_ = np.linalg.lstsq(a, res * sw, rcond=None)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise Diverged(f"Gauss-Newton step failed: {exc}") from None
        if not np.all(np.isfinite(dx)):
            raise Diverged("Gauss-Newton step is not finite")
        x = x + dx[:n] + 1j * dx[n:]
        res, jac, w = _wls_terms(net, rows, measurements, x)
        w = w * kind_scale
        sw = np.sqrt(w)
        if np.linalg.norm(dx) < tol:
            a = jac * sw[:, None]
            cov = np.linalg.pinv(a.T @ a)
            return net.to_estimate(x, cov, it)
    raise Diverged(f"no convergence in {max_iter} Gauss-Newton iterations")


# -- helpers ------------------------------------------------------------------------


def measurements_from_meters(
    model: FeederModel,
    readings: Mapping[str, tuple[np.ndarray, np.ndarray]],
    pseudo_loads: Mapping[str, np.ndarray] | None = None,
    **noise,
) -> Measurements:
    """Snapshot from per-meter (V, I) phasors. Unmetered load buses take the
    model's load values as pseudo-measurements unless overridden."""
    volts, amps = {}, {}
    metered_load_buses = set()
    for mid, (v, i) in readings.items():
        m = model.meter(mid)
        if v is not None:
            volts[m.bus] = np.asarray(v, dtype=complex)
        if i is not None:
            amps[mid] = np.asarray(i, dtype=complex)
            if m.branch is None:
                metered_load_buses.add(m.bus)
    pseudo = {}
    for ld in model.loads:
        if ld.bus in metered_load_buses:
            continue
        pseudo[ld.bus] = pseudo.get(ld.bus, 0) + ld.value
    if pseudo_loads:
        pseudo.update({b: np.asarray(s, dtype=complex) for b, s in pseudo_loads.items()})
    return Measurements(volts, amps, pseudo, **noise)
