"""Diagnostic runners behind ``upmu diagnose`` and scenario runs.

Each runner reads meter streams from the store over the requested window,
calls the analytics and returns a :class:`Report` with a machine-readable
summary, a plot-ready table and a few human-readable lines.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..diagnostics import (
    TopologyHypothesis,
    check_requirements,
    cusum_change_points,
    detect_reverse_flow,
    detect_topology_voting,
    estimate_line_impedance,
    estimate_transformer_impedance,
    identify_phase,
    linear_state_estimate,
    locate_fault,
    measurements_from_meters,
    phasor_windows,
    wls_state_estimate,
)
from ..diagnostics.kpca import DEFAULT_WINDOW, KernelPCA
from ..diagnostics.reverse_flow import phase_real_power
from ..errors import ValidationError
from ..feeder.model import FeederModel, LineBranch, TransformerBranch
from ..phasor import PHASES, wrap_angles
from ..store import Store
from .archive import load_streams
from .scenario import Simulation


@dataclass
class Report:
    kind: str
    name: str
    summary: dict
    columns: list[str] = field(default_factory=list)
    rows: list[tuple] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)


@dataclass
class Context:
    store: Store
    model: FeederModel
    sim: Simulation
    meters: tuple[str, ...]

    def ns(self, t: float) -> int:
        return self.sim.seconds_to_ns(t)

    def span(self, d: dict, key: str = "window") -> tuple[int, int]:
        if key in d:
            t0, t1 = d[key]
            return self.ns(t0), self.ns(t1)
        return self.ns(0.0), self.ns(self.sim.duration) + 1

    def streams(self, d: dict, ids, key: str = "window"):
        t0, t1 = self.span(d, key)
        return load_streams(self.store, self.model, ids, t0, t1)

    def model_for(self, d: dict) -> FeederModel:
        sw = d.get("switches")
        if not sw:
            return self.model
        status = {s.id: s.closed for s in self.model.switches}
        status.update(sw)
        return self.model.with_switches(status)


def _c(z: complex) -> list[float]:
    return [float(np.real(z)), float(np.imag(z))]


def _meter_on(model: FeederModel, bus: str, meters, branch: str | None = None, end: str | None = None) -> str:
    for m in model.meters:
        if m.id in meters and m.bus == bus and (branch is None or (m.branch == branch and m.end == end)):
            return m.id
    what = f"branch {branch} ({end} end)" if branch else f"bus {bus}"
    raise ValidationError(f"no recorded meter measures {what}")


def run_impedance(ctx: Context, d: dict) -> Report:
    br = ctx.model.branch(d["branch"])
    if not isinstance(br, (LineBranch, TransformerBranch)):
        raise ValidationError(f"branch {br.id} is a switch; impedance needs a line or transformer")
    fm = d.get("from_meter") or _meter_on(ctx.model, br.from_bus, ctx.meters)
    tm = d.get("to_meter") or _meter_on(ctx.model, br.to_bus, ctx.meters)
    if "current_meter" in d:
        cm = d["current_meter"]
        m = ctx.model.meter(cm)
        if m.branch != br.id:
            raise ValidationError(f"meter {cm} does not read branch {br.id}")
    else:
        cm = None
        for end in ("to", "from"):
            try:
                cm = _meter_on(ctx.model, br.to_bus if end == "to" else br.from_bus, ctx.meters, br.id, end)
                break
            except ValidationError:
                continue
        if cm is None:
            raise ValidationError(f"no recorded meter reads the current of {br.id}")
    _, s = ctx.streams(d, sorted({fm, tm, cm}))
    kw = {"branch_id": br.id}
    if "max_condition" in d:
        kw["max_condition"] = d["max_condition"]
    if isinstance(br, LineBranch):
        est = estimate_line_impedance(s[fm].voltage, s[tm].voltage, s[cm].current, z_true=br.z, **kw)
    else:
        if ctx.model.meter(cm).end != "to":
            raise ValidationError(f"transformer impedance needs the low-side current; {cm} reads the high side")
        est = estimate_transformer_impedance(s[fm].voltage, s[tm].voltage, s[cm].current, br.n_t, z_true=br.z_abc, **kw)
    z_model = br.z if isinstance(br, LineBranch) else br.z_abc
    rows = [(PHASES[i], PHASES[j], float(est.z_hat[i, j].real), float(est.z_hat[i, j].imag),
             float(z_model[i, j].real), float(z_model[i, j].imag)) for i in range(3) for j in range(3)]
    summary = {
        "branch": br.id,
        "meters": {"from": fm, "to": tm, "current": cm},
        "z_hat_ohm": [[_c(z) for z in row] for row in est.z_hat],
        "relative_error_vs_model": est.relative_error_norm,
        "condition": est.condition_metric,
        "residual_rms": est.residual_rms,
        "samples": est.n_samples,
    }
    lines = [f"branch {br.id}: {est.n_samples} samples, condition {est.condition_metric:.4g}",
             f"relative error against the model impedance: {100 * est.relative_error_norm:.3f}%"]
    return Report("impedance", d["name"], summary, ["row", "col", "r_hat_ohm", "x_hat_ohm", "r_model_ohm", "x_model_ohm"],
                  rows, lines)


def run_phase_id(ctx: Context, d: dict) -> Report:
    _, s = ctx.streams(d, [d["reference"], d["candidate"]])
    kw = {}
    if "angle_gate_deg" in d:
        kw["angle_gate"] = math.radians(d["angle_gate_deg"])
    if "tie_tolerance" in d:
        kw["tie_tolerance"] = d["tie_tolerance"]
    a = identify_phase(s[d["reference"]].voltage, s[d["candidate"]].voltage, meter_id=d["candidate"], **kw)
    summary = {"reference": d["reference"], "candidate": d["candidate"], "mapping": a.mapping,
               "offset_deg": a.offset_deg, "mean_correlation": a.score, "angle_residual_deg": a.angle_residual_deg}
    rows = [(local, ref) for local, ref in sorted(a.mapping.items())]
    lines = [f"{d['candidate']} against {d['reference']}: "
             + ", ".join(f"{k}->{v}" for k, v in sorted(a.mapping.items()))
             + f", offset {a.offset_deg} deg, mean correlation {a.score:.3f}"]
    return Report("phase_id", d["name"], summary, ["local_label", "reference_phase"], rows, lines)


def _hypotheses(model: FeederModel, d: dict) -> list[TopologyHypothesis]:
    if "hypotheses" in d:
        return [TopologyHypothesis.from_closed(model, h["closed"], h["id"]) for h in d["hypotheses"]]
    ids = [s.id for s in model.switches]
    if not ids:
        raise ValidationError("the model has no switches; give hypotheses explicitly")
    out = []
    for bits in itertools.product((False, True), repeat=len(ids)):
        out.append(TopologyHypothesis.from_closed(model, [i for i, b in zip(ids, bits) if b]))
    return out


def run_topology(ctx: Context, d: dict) -> Report:
    ids = d.get("meters", list(ctx.meters))
    ts, s = ctx.streams(d, ids)
    pseudo = None
    if "pseudo_loads" in d:
        pseudo = {b: np.asarray(v["p"], float) + 1j * np.asarray(v.get("q", [0, 0, 0]), float)
                  for b, v in d["pseudo_loads"].items()}
    res = detect_topology_voting(ctx.model, _hypotheses(ctx.model, d), s, residual=d.get("residual", "complex"),
                                 pseudo_loads=pseudo)
    means = {h.id: (float(np.nanmean(res.residuals[:, j])) if np.isfinite(res.residuals[:, j]).any() else None)
             for j, h in enumerate(res.hypotheses)}
    summary = {"winner": res.winner.id, "closed": res.winner.closed(ctx.model), "shares": res.shares,
               "disqualified": res.disqualified, "samples": int(np.sum(res.votes >= 0)),
               "mean_residual": means}
    rows = [(int(t), (res.hypotheses[v].id if v >= 0 else ""),
             *[float(x) for x in res.residuals[k]]) for k, (t, v) in enumerate(zip(ts, res.votes))]
    lines = [f"winner {res.winner.id} with {100 * res.shares[res.winner.id]:.1f}% of the votes"]
    lines += [f"  {h}: share {100 * sh:.1f}%" for h, sh in res.shares.items()]
    return Report("topology", d["name"], summary, ["t_ns", "vote", *[f"residual_{h.id}" for h in res.hypotheses]],
                  rows, lines)


def run_switch(ctx: Context, d: dict) -> Report:
    ref = d.get("reference") or _meter_on(ctx.model, ctx.model.source_bus, ctx.meters)
    p = PHASES.index(d.get("phase", "a"))
    ts, s = ctx.streams(d, sorted({d["meter"], ref}))
    v = s[d["meter"]].voltage[:, p]
    if d.get("quantity", "angle") == "angle":
        x = wrap_angles(np.angle(v) - np.angle(s[ref].voltage[:, p]))
    else:
        x = np.abs(v) / s[d["meter"]].v_base
    ok = np.isfinite(x)
    kw = {k: d[k] for k in ("drift", "threshold", "warmup") if k in d}
    idx = cusum_change_points(x[ok], **kw)
    t_ok = ts[ok]
    points = [int(t_ok[i]) for i in idx]
    hit = set(points)
    rows = [(int(t), float(val), int(int(t) in hit)) for t, val in zip(t_ok, x[ok])]
    t0 = ctx.sim.start_ns
    summary = {"meter": d["meter"], "reference": ref, "quantity": d.get("quantity", "angle"), "phase": PHASES[p],
               "change_points_ns": points, "change_points_s": [(t - t0) / 1e9 for t in points]}
    lines = [f"{len(points)} change point(s) on {d['meter']}"] + [f"  t = {(t - t0) / 1e9:.4f} s" for t in points]
    return Report("switch", d["name"], summary, ["t_ns", "value", "change_point"], rows, lines)


def run_state_estimation(ctx: Context, d: dict) -> Report:
    model = ctx.model_for(d)
    ids = d.get("meters", list(ctx.meters))
    ts, s = ctx.streams(d, ids)
    at = ctx.ns(d["at"]) if "at" in d else ts[0]
    k = int(np.searchsorted(ts, at))
    while k < ts.size and not all(np.all(np.isfinite(s[m].voltage[k])) for m in ids):
        k += 1
    if k >= ts.size:
        raise ValidationError("no complete frame at or after the requested time")
    readings = {m: (s[m].voltage[k], s[m].current[k]) for m in ids}
    meas = measurements_from_meters(model, readings)
    method = d.get("method", "linear")
    if method == "linear":
        kw = {"prior_sigma_pu": d["prior_sigma_pu"]} if "prior_sigma_pu" in d else {}
        est = linear_state_estimate(model, meas, None, None, **kw)
    else:
        est = wls_state_estimate(model, meas)
    rows, buses = [], {}
    for i, bus in enumerate(est.buses):
        base = model.bus_base(bus)
        buses[bus] = [_c(v) for v in est.voltages[i]]
        for p in range(3):
            v = est.voltages[i, p]
            rows.append((bus, PHASES[p], float(abs(v) / base), float(np.degrees(np.angle(v))),
                         float(est.std_real[i, p] / base), float(est.std_imag[i, p] / base)))
    summary = {"method": method, "t_ns": int(ts[k]), "iterations": est.iterations, "voltages_v": buses}
    lines = [f"{method} estimate at t = {(int(ts[k]) - ctx.sim.start_ns) / 1e9:.4f} s"]
    lines += [f"  {b} {p}: {m:.5f} pu at {a:8.3f} deg" for b, p, m, a, *_ in rows]
    return Report("state_estimation", d["name"], summary,
                  ["bus", "phase", "v_mag_pu", "v_ang_deg", "std_real_pu", "std_imag_pu"], rows, lines)


def run_kpca(ctx: Context, d: dict) -> Report:
    ids = d.get("meters", list(ctx.meters))
    ref = d.get("reference") or _meter_on(ctx.model, ctx.model.source_bus, ids)
    if ref not in ids:
        ids = [*ids, ref]
    width = d.get("frames_per_window", DEFAULT_WINDOW)
    bases = {m: ctx.model.bus_base(ctx.model.meter(m).bus) for m in ids}

    def feats(key):
        ts, s = ctx.streams(d, ids, key)
        return phasor_windows({m: s[m].voltage for m in ids}, ref, ts, width, bases)

    x, _ = feats("train")
    y, bounds = feats("test")
    model = KernelPCA.fit(x, kernel=d.get("kernel", "gaussian"), kernel_width=d.get("kernel_width"),
                          n_components=d.get("n_components"), threshold_quantile=d.get("threshold_quantile", 0.99))
    scores = model.score(y)
    flags = scores > model.threshold
    rows = [(a, b, float(sc), model.threshold, int(f)) for (a, b), sc, f in zip(bounds, scores, flags)]
    t0 = ctx.sim.start_ns
    events = [[(a - t0) / 1e9, (b - t0) / 1e9] for (a, b), f in zip(bounds, flags) if f]
    summary = {"reference": ref, "meters": list(ids), "train_windows": int(x.shape[0]), "test_windows": int(y.shape[0]),
               "threshold": model.threshold, "flagged": int(flags.sum()), "flagged_windows_s": events}
    lines = [f"{int(flags.sum())} of {y.shape[0]} test windows above threshold {model.threshold:.4g}"]
    return Report("kpca", d["name"], summary, ["window_start_ns", "window_end_ns", "score", "threshold", "anomaly"],
                  rows, lines)


def run_fault(ctx: Context, d: dict) -> Report:
    model = ctx.model_for(d)
    _, pre = ctx.streams(d, list(ctx.meters), "prefault")
    _, dur = ctx.streams(d, list(ctx.meters), "during")
    kw = {k: d[k] for k in ("phases", "resistance") if k in d}
    loc = locate_fault(model, pre, dur, **kw)
    summary = {"branch": loc.branch_id, "distance_fraction": loc.distance_fraction, "phases": loc.phases,
               "mismatch": loc.mismatch}
    rows = [(c[0], float(c[1]), float(c[2])) for c in loc.candidates]
    lines = [f"fault on {loc.branch_id} at {100 * loc.distance_fraction:.1f}% of its length, phases {loc.phases}"]
    return Report("fault", d["name"], summary, ["branch", "distance_fraction", "mismatch"], rows, lines)


def run_reverse_flow(ctx: Context, d: dict) -> Report:
    ts, s = ctx.streams(d, [d["meter"]])
    ms = s[d["meter"]]
    base = ctx.model.phase_power_base
    kw = {"deadband_pu": d["deadband_pu"]} if "deadband_pu" in d else {}
    flags = detect_reverse_flow(ms.voltage, ms.current, base, **kw)
    p = phase_real_power(ms.voltage, ms.current) / base
    rows = [(int(t), *map(float, p[k]), *map(int, flags[k])) for k, t in enumerate(ts)]
    summary = {"meter": d["meter"], "samples": int(ts.size),
               "reverse_fraction": {ph: float(np.mean(flags[:, k])) if ts.size else 0.0 for k, ph in enumerate(PHASES)}}
    lines = [f"{d['meter']}: reverse real power in "
             + ", ".join(f"{ph} {100 * v:.1f}%" for ph, v in summary["reverse_fraction"].items()) + " of samples"]
    return Report("reverse_flow", d["name"], summary,
                  ["t_ns", "p_a_pu", "p_b_pu", "p_c_pu", "reverse_a", "reverse_b", "reverse_c"], rows, lines)


def requirements_report(name: str, use_case: str, **values) -> Report:
    rep = check_requirements(use_case, **{k: v for k, v in values.items() if v is not None})
    rows = [(r.criterion, r.measured, r.limit, int(r.passed), r.margin) for r in rep.results]
    lines = [f"use case '{rep.use_case}': {'PASS' if rep.passed else 'FAIL'}"]
    lines += [f"  {r.criterion}: measured {r.measured:g}, limit {r.limit:g} -> {'pass' if r.passed else 'fail'}"
              for r in rep.results]
    return Report("requirements", name, rep.to_dict(), ["criterion", "measured", "limit", "passed", "margin"], rows, lines)


def run_requirements(ctx: Context | None, d: dict) -> Report:
    keys = ("tve_percent", "latency_s", "report_rate_hz", "angle_resolution_mdeg")
    return requirements_report(d["name"], d["use_case"], **{k: d.get(k) for k in keys})


RUNNERS: dict[str, Callable[[Context, dict], Report]] = {
    "impedance": run_impedance,
    "phase_id": run_phase_id,
    "topology": run_topology,
    "switch": run_switch,
    "state_estimation": run_state_estimation,
    "kpca": run_kpca,
    "fault": run_fault,
    "reverse_flow": run_reverse_flow,
    "requirements": run_requirements,
}
