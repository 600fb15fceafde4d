import cmath
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upmu.errors import Diverged, InvalidRatio, ModelViolation, NotRadial, ValidationError
from upmu.feeder import (
    Event,
    FeederModel,
    LineBranch,
    Load,
    Meter,
    NoiseModel,
    SwitchBranch,
    TransformerBranch,
    line_drop,
    simulate_telemetry,
    solve_power_flow,
    transformer_ratio_matrix,
    transformer_secondary,
)
from upmu.feeder import library
from upmu.feeder.telemetry import random_walk_profiles
from upmu.phasor import ThreePhaseSet, wrap_angles


def newton_oracle(model: FeederModel, tol=1e-12, max_iter=60):
    """Independent nodal solve of a line-only feeder with constant-power loads.

    Unknowns are the non-source bus voltages; the residual is the current
    mismatch at every bus. Damped Newton with a finite-difference Jacobian.
    """
    buses = list(model.buses)
    n = len(buses)
    Y = np.zeros((3 * n, 3 * n), dtype=complex)
    for br in model.branches:
        y = np.linalg.inv(br.z)
        f, t = buses.index(br.from_bus), buses.index(br.to_bus)
        for (a, b, s) in ((f, f, 1), (t, t, 1), (f, t, -1), (t, f, -1)):
            Y[3 * a : 3 * a + 3, 3 * b : 3 * b + 3] += s * y
    src = buses.index(model.source_bus)
    free = [k for k in range(n) if k != src]
    s_load = np.zeros((n, 3), dtype=complex)
    for ld in model.loads:
        s_load[buses.index(ld.bus)] += ld.value

    def unpack(x):
        v = np.zeros((n, 3), dtype=complex)
        v[src] = model.source_voltage
        z = x[: 3 * len(free)] + 1j * x[3 * len(free) :]
        v[free] = z.reshape(len(free), 3)
        return v

    def residual(x):
        v = unpack(x)
        inj = (Y @ v.reshape(-1)).reshape(n, 3) + np.conj(s_load / v)
        r = inj[free].reshape(-1)
        return np.concatenate([r.real, r.imag])

    v0 = np.tile(model.source_voltage, (len(free), 1)).reshape(-1)
    x = np.concatenate([v0.real, v0.imag])
    for _ in range(max_iter):
        r = residual(x)
        if np.max(np.abs(r)) < tol:
            break
        h = 1e-6
        J = np.empty((r.size, x.size))
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h
            J[:, k] = (residual(x + e) - residual(x - e)) / (2 * h)
        step = np.linalg.solve(J, -r)
        lam = 1.0
        while lam > 1e-4 and np.linalg.norm(residual(x + lam * step)) > np.linalg.norm(r):
            lam /= 2
        x = x + lam * step
    return unpack(x)


def pu_max(model, v, ref):
    bases = np.array([model.bus_base(b) for b in model.buses])[:, None]
    return float(np.max(np.abs(v - ref) / bases))


class TestRatioMatrix:
    def test_unit_ratio(self):
        np.testing.assert_array_equal(transformer_ratio_matrix(1), [[1, 0, -1], [-1, 1, 0], [0, -1, 1]])

    @given(st.floats(1e-3, 1e3))
    def test_rows_sum_to_zero(self, n_t):
        np.testing.assert_allclose(transformer_ratio_matrix(n_t).sum(axis=1), 0.0, atol=1e-15)

    def test_halved(self):
        np.testing.assert_allclose(transformer_ratio_matrix(2), transformer_ratio_matrix(1) / 2)

    @pytest.mark.parametrize("bad", [0, -1.5])
    def test_invalid(self, bad):
        with pytest.raises(InvalidRatio):
            transformer_ratio_matrix(bad)


class TestLineDrop:
    def test_zero_current(self):
        z = library.overhead_line(1.0)
        drop = line_drop(z, ThreePhaseSet.from_array([0, 0, 0]))
        np.testing.assert_array_equal(drop.to_array(), 0)

    def test_diagonal_single_phase(self):
        z = np.diag([0.3 + 0.6j, 0.4 + 0.7j, 0.5 + 0.8j])
        drop = line_drop(z, ThreePhaseSet.from_array([10 - 5j, 0, 0])).to_array()
        assert drop[0] == pytest.approx((0.3 + 0.6j) * (10 - 5j))
        assert abs(drop[1]) == 0 and abs(drop[2]) == 0

    def test_mutual_coupling_matches_elementwise_oracle(self):
        z = library.overhead_line(1.3)
        i = np.array([120 * cmath.exp(-0.3j), 80 * cmath.exp(-2.4j), 150 * cmath.exp(1.9j)])
        oracle = [sum(z[r][c] * i[c] for c in range(3)) for r in range(3)]
        got = line_drop(z, ThreePhaseSet.from_array(i)).to_array()
        np.testing.assert_allclose(got, oracle, rtol=1e-12)

    def test_asymmetric_rejected(self):
        z = library.overhead_line(1.0).copy()
        z[0, 1] += 0.1
        with pytest.raises(ModelViolation):
            line_drop(z, ThreePhaseSet.from_array([1, 1, 1]))


class TestTransformer:
    def test_no_load_is_pure_ratio(self):
        xf = library.transformer_pair().branch("T1")
        v = np.array([7200, 7200 * cmath.exp(-2.0944j), 7200 * cmath.exp(2.0944j)])
        out = transformer_secondary(ThreePhaseSet.from_array(v), ThreePhaseSet.from_array([0, 0, 0]), xf)
        np.testing.assert_allclose(out.to_array(), xf.a_t @ v, rtol=1e-12)

    def test_delta_wye_thirty_degree_shift(self):
        xf = TransformerBranch("T", "h", "l", 1.0, np.zeros((3, 3)))
        a = cmath.exp(2j * math.pi / 3)
        v = np.array([1, a**2, a])
        out = transformer_secondary(ThreePhaseSet.from_array(v), ThreePhaseSet.from_array([0, 0, 0]), xf)
        # symbolic oracle: phase a = V_A - V_C = 1 - a = sqrt(3) at -30 degrees
        expected = [cmath.phase(1 - a), cmath.phase(a**2 - 1), cmath.phase(a - a**2)]
        np.testing.assert_allclose(np.degrees(expected), [-30, -150, 90], atol=1e-9)
        np.testing.assert_allclose([p.angle for p in out], expected, atol=1e-12)
        np.testing.assert_allclose([p.magnitude for p in out], math.sqrt(3), rtol=1e-12)

    def test_off_diagonal_rejected(self):
        with pytest.raises(ModelViolation):
            TransformerBranch("T", "h", "l", 2.0, np.ones((3, 3)))

    def test_solver_round_trip_residual(self):
        m = library.transformer_pair()
        sol = solve_power_flow(m)
        xf = m.branch("T1")
        vh = ThreePhaseSet.from_array(sol.voltage("hv")[0])
        il = ThreePhaseSet.from_array(sol.current("T1", "to")[0])
        vl = transformer_secondary(vh, il, xf).to_array()
        assert np.max(np.abs(vl - sol.voltage("lv")[0])) / m.bus_base("lv") <= 1e-9


class TestPowerFlow:
    def test_zero_load_propagates_source(self):
        m = library.phase_id_feeder()
        m = m.with_loads([])
        sol = solve_power_flow(m)
        src = m.source_voltage
        np.testing.assert_allclose(sol.voltage("p3")[0], src, rtol=1e-12)
        a_t = m.branch("T1").a_t
        np.testing.assert_allclose(sol.voltage("s1")[0], a_t @ src, rtol=1e-12)

    def test_constant_current_single_line_one_iteration(self):
        z = library.overhead_line(1.2)
        i = np.array([100 * cmath.exp(-0.4j), 70 * cmath.exp(-2.5j), 90 * cmath.exp(1.7j)])
        m = replace(library.two_bus_line(z), loads=(Load("load", i, kind="current"),))
        sol = solve_power_flow(m)
        assert sol.iterations == 1
        np.testing.assert_allclose(sol.voltage("load")[0], m.source_voltage - z @ i, rtol=1e-13)

    def test_four_bus_matches_newton_oracle(self):
        m = library.four_bus_feeder()
        oracle = newton_oracle(m)
        sol = solve_power_flow(m)
        assert pu_max(m, sol.voltages[0], oracle) <= 1e-6

    def test_kcl_and_branch_residuals(self):
        m = library.fault_feeder()
        sol = solve_power_flow(m)
        check_kcl(m, sol)
        check_branch_equations(m, sol)

    def test_kcl_with_transformers_and_switches(self):
        for m in (library.phase_id_feeder(), library.switched_six_bus_feeder()):
            sol = solve_power_flow(m)
            check_kcl(m, sol)
            check_branch_equations(m, sol)

    def test_open_switch_carries_no_current(self):
        m = library.switched_six_bus_feeder()
        sol = solve_power_flow(m)
        assert np.all(sol.current("S2") == 0) and np.all(sol.current("S3") == 0)

    def test_loop_rejected(self):
        m = library.switched_six_bus_feeder().with_switches({"S2": True})
        with pytest.raises(NotRadial):
            solve_power_flow(m)

    def test_deenergized_bus_reads_zero(self):
        m = library.switched_six_bus_feeder().with_switches({"S1": False})
        sol = solve_power_flow(m)
        assert not sol.energized[m.bus_index("b5")]
        assert np.all(sol.voltage("b5") == 0)

    def test_divergence_reported(self):
        m = library.two_bus_line(load_va=np.array([2e8, 2e8, 2e8]))
        with pytest.raises(Diverged):
            solve_power_flow(m)

    def test_opening_unloaded_subtree_leaves_rest_unchanged(self):
        m = library.switched_six_bus_feeder()
        m = m.with_loads([ld for ld in m.loads if ld.bus != "b5"])
        closed = solve_power_flow(m)
        opened = solve_power_flow(m.with_switches({"S1": False}))
        live = [m.bus_index(b) for b in ("sub", "b1", "b2", "b3", "b4")]
        np.testing.assert_array_equal(closed.voltages[:, live], opened.voltages[:, live])

    def test_batched_matches_individual(self):
        m = library.four_bus_feeder()
        base = np.array([ld.value for ld in m.loads])
        scales = np.array([0.5, 1.0, 1.3])
        batch = solve_power_flow(m, load_values=base[None] * scales[:, None, None])
        for k, s in enumerate(scales):
            single = solve_power_flow(m, load_values=base * s)
            assert pu_max(m, batch.voltages[k], single.voltages[0]) < 1e-9

    def test_fault_model_splits_line(self):
        m = library.fault_feeder()
        f = m.with_fault("L3", 0.25, "b")
        np.testing.assert_allclose(f.branch("L3#1").z + f.branch("L3#2").z, m.branch("L3").z)
        sol = solve_power_flow(f)
        assert abs(sol.voltage("L3@fault")[0, 1]) / f.bus_base("sub") < 0.01
        check_kcl(f, sol)


def check_kcl(model, sol, tol=1e-8):
    for k, bus in enumerate(model.buses):
        if bus == model.source_bus:
            continue
        ib = model.current_base(bus)
        mismatch = sol.load_current[:, k] + sol.shunt_current[:, k]
        for bi, br in enumerate(model.branches):
            if br.from_bus == bus:
                mismatch = mismatch + sol.branch_from[:, bi]
            if br.to_bus == bus:
                mismatch = mismatch - sol.branch_to[:, bi]
        assert np.max(np.abs(mismatch)) / ib <= tol, bus


def check_branch_equations(model, sol, tol=1e-8):
    for bi, br in enumerate(model.branches):
        vf = sol.voltage(br.from_bus)
        vt = sol.voltage(br.to_bus)
        base = model.bus_base(br.to_bus)
        if isinstance(br, LineBranch):
            res = vf - vt - np.einsum("ij,bj->bi", br.z, sol.branch_from[:, bi])
        elif isinstance(br, TransformerBranch):
            res = np.einsum("ij,bj->bi", br.a_t, vf) - vt - np.einsum("ij,bj->bi", br.z_abc, sol.branch_to[:, bi])
        elif br.closed and sol.energized[model.bus_index(br.from_bus)]:
            res = vf - vt
        else:
            res = sol.branch_from[:, bi]
        assert np.max(np.abs(res)) / base <= tol, br.id


class TestTelemetry:
    def test_noiseless_constant_frames_identical(self):
        m = library.two_bus_line()
        tel = simulate_telemetry(m, noise=NoiseModel.noiseless(), duration=0.5)
        v = tel.meters["m_load"].voltage
        assert v.shape == (60, 3)
        assert np.all(v == v[0])
        assert np.all(np.diff(tel.timestamps) > 0)

    def test_report_rate(self):
        tel = simulate_telemetry(library.two_bus_line(), duration=2.0)
        assert tel.timestamps.size == 240
        assert (tel.timestamps[-1] - tel.timestamps[0]) == pytest.approx(239 / 120 * 1e9, abs=1)

    def test_noise_statistics_match_defaults(self):
        m = library.two_bus_line()
        truth = simulate_telemetry(m, noise=NoiseModel.noiseless(), duration=10000 / 120)
        tel = simulate_telemetry(m, noise=NoiseModel(seed=3), duration=10000 / 120)
        t_v = truth.meters["m_load"].voltage[:, 0]
        v = tel.meters["m_load"].voltage[:, 0]
        ang_sd = np.std(wrap_angles(np.angle(v) - np.angle(t_v)), ddof=1)
        mag_sd = np.std((np.abs(v) - np.abs(t_v)) / m.bus_base("load"), ddof=1)
        assert abs(ang_sd - math.radians(0.01)) <= 0.2 * math.radians(0.01)
        assert abs(mag_sd - 1.7e-4) <= 0.2 * 1.7e-4

    def test_ratio_errors_scale_magnitudes_only(self):
        m = library.two_bus_line()
        truth = simulate_telemetry(m, noise=NoiseModel.noiseless(), duration=0.5)
        tel = simulate_telemetry(m, noise=NoiseModel(0.0, 0.0, 0, pt_ratio_error=0.01, ct_ratio_error=-0.02),
                                 duration=0.5)
        t, s = truth.meters["m_load"], tel.meters["m_load"]
        np.testing.assert_allclose(s.voltage, 1.01 * t.voltage, rtol=1e-12)
        np.testing.assert_allclose(s.current, 0.98 * t.current, rtol=1e-12)

    def test_ratio_error_bounds(self):
        with pytest.raises(ValidationError):
            NoiseModel(pt_ratio_error=-1.0)

    def test_deterministic_under_seed(self):
        m = library.four_bus_feeder()
        prof = random_walk_profiles(m, 240, seed=5)
        a = simulate_telemetry(m, prof, NoiseModel(seed=9), duration=2.0)
        b = simulate_telemetry(m, prof, NoiseModel(seed=9), duration=2.0)
        for mid in a.meters:
            assert a.meters[mid].voltage.tobytes() == b.meters[mid].voltage.tobytes()
            assert a.meters[mid].current.tobytes() == b.meters[mid].current.tobytes()

    def test_switch_toggle_step_matches_static_solves(self):
        m = library.switched_six_bus_feeder()
        events = [Event(0.4925, "switch_toggle", {"branch": "S1"}), Event(0.495, "switch_toggle", {"branch": "S2"})]
        tel = simulate_telemetry(m, noise=NoiseModel.noiseless(), events=events, duration=1.0)
        diff = np.angle(tel.meters["m_b3"].voltage[:, 0]) - np.angle(tel.meters["m_b1"].voltage[:, 0])
        k = 60  # first report after both toggles (frame 59 is at 0.4917 s)
        step = diff[k] - diff[k - 1]
        before = solve_power_flow(m)
        after = solve_power_flow(m.with_switches({"S1": False, "S2": True}))
        oracle = (np.angle(after.voltage("b3")[0, 0]) - np.angle(after.voltage("b1")[0, 0])) - (
            np.angle(before.voltage("b3")[0, 0]) - np.angle(before.voltage("b1")[0, 0])
        )
        assert step == pytest.approx(oracle, abs=1e-12)
        assert abs(step) > 1e-4
        assert np.all(diff[:k] == diff[0]) and np.all(diff[k:] == diff[k])

    def test_failed_solve_marks_gap(self):
        m = library.switched_six_bus_feeder()
        events = [Event(0.25, "switch_toggle", {"branch": "S2"})]  # closes a loop
        tel = simulate_telemetry(m, noise=NoiseModel.noiseless(), events=events, duration=0.5)
        assert tel.gap[:30].sum() == 0 and tel.gap[30:].all()
        assert np.isnan(tel.meters["m_b1"].voltage[45]).all()
        assert len(list(tel.frames("m_b1"))) == 30
        assert "NotRadial" in next(iter(tel.gap_reasons.values()))

    def test_sag_event(self):
        m = library.two_bus_line()
        ev = [Event(0.2, "sag", {"depth": 0.1, "duration": 0.1})]
        tel = simulate_telemetry(m, noise=NoiseModel.noiseless(), events=ev, duration=0.5)
        mag = np.abs(tel.meters["m_sub"].voltage[:, 0]) / m.v_base
        assert mag[10] == pytest.approx(1.0)
        assert mag[30] == pytest.approx(0.9)
        assert mag[40] == pytest.approx(1.0)

    def test_bolted_fault_event_collapses_voltage(self):
        m = library.fault_feeder()
        ev = [Event(0.1, "bolted_fault", {"branch": "L3", "distance_fraction": 1.0, "phases": "a", "duration": 0.1})]
        tel = simulate_telemetry(m, noise=NoiseModel.noiseless(), events=ev, duration=0.3)
        v = np.abs(tel.meters["m_b3"].voltage[:, 0]) / m.v_base
        assert v[5] > 0.9 and v[15] < 0.01 and v[30] > 0.9

    @pytest.mark.parametrize(
        "event",
        [
            Event(0.1, "switch_toggle", {"branch": "L1"}),
            Event(5.0, "sag", {"depth": 0.1, "duration": 0.1}),
            Event(0.1, "sag", {"depth": 0.1}),
            Event(0.1, "warp", {}),
        ],
    )
    def test_invalid_events(self, event):
        with pytest.raises(ValidationError):
            simulate_telemetry(library.two_bus_line(), events=[event], duration=1.0)
