import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upmu.distil import KERNELS, DistillerSpec, Pipeline, join_nearest, kernel
from upmu.distil.kernels import frequency_deviation, magnitude_correlation
from upmu.errors import CyclicDependency, NotFound, OutputClaimed, ValidationError
from upmu.phasor import wrap_angles
from upmu.store import Store

DT = 8_333_333  # one report at 120 frames/s


@kernel("test_scale", 1)
def _scale(times, values, factor=2.0):
    return times, values[0] * factor


@kernel("test_fragile", 1)
def _fragile(times, values):
    if np.any(values[0] < 0):
        raise ArithmeticError("negative input")
    return times, np.sqrt(values[0])


def frames(n, start=0, jitter=None):
    t = start + np.arange(n, dtype=np.int64) * DT
    if jitter is not None:
        t = t + jitter
    return t


class TestRegistry:
    def test_identity_distiller(self):
        s = Store()
        s.insert("m/V_mag_a", frames(300), np.arange(300.0))
        p = Pipeline(s)
        p.register(DistillerSpec("copy", ("m/V_mag_a",), "m/copy", "identity"))
        (mat,) = p.propagate()
        np.testing.assert_array_equal(s.query_raw("m/copy")[1], np.arange(300.0))
        assert mat.input_versions == {"m/V_mag_a": [0, 1]}

    def test_output_claimed(self):
        p = Pipeline(Store())
        p.register(DistillerSpec("a", ("m/V_mag_a",), "m/out", "identity"))
        with pytest.raises(OutputClaimed):
            p.register(DistillerSpec("b", ("m/V_mag_b",), "m/out", "identity"))

    def test_cycle_rejected(self):
        p = Pipeline(Store())
        p.register(DistillerSpec("a", ("m/x",), "m/y", "identity"))
        p.register(DistillerSpec("b", ("m/y",), "m/z", "identity"))
        with pytest.raises(CyclicDependency):
            p.register(DistillerSpec("c", ("m/z",), "m/x", "identity"))
        with pytest.raises(CyclicDependency):
            p.register(DistillerSpec("d", ("m/w",), "m/w", "identity"))
        assert p.order() == ["a", "b"]

    def test_bad_specs(self):
        with pytest.raises(NotFound):
            DistillerSpec("x", ("m/a",), "m/b", "no_such_kernel")
        with pytest.raises(ValidationError):
            DistillerSpec("x", ("m/a",), "m/b", "angle_difference")

    def test_registry_persisted(self, tmp_path):
        with Store(tmp_path) as s:
            s.insert("m/V_ang_a", frames(50), np.zeros(50))
            s.insert("m/V_ang_b", frames(50), np.ones(50))
            p = Pipeline(s)
            p.register(DistillerSpec("d", ("m/V_ang_a", "m/V_ang_b"), "m/diff", "angle_difference"))
            p.propagate()
        with Store(tmp_path) as s:
            p = Pipeline(s)
            assert list(p.specs) == ["d"] and len(p.log) == 1
            assert p.propagate() == []
            s.insert("m/V_ang_a", frames(1, start=50 * DT), [0.5])
            (m,) = p.propagate()
            assert m.input_versions["m/V_ang_a"] == [1, 2]
            assert s.query_raw("m/diff")[0].size == 50


class TestPropagate:
    def setup_chain(self, chunk_pw=22):
        s = Store()
        p = Pipeline(s)
        p.register(DistillerSpec("diff", ("m/V_ang_a", "m/V_ang_b"), "m/diff", "angle_difference", chunk_pointwidth=chunk_pw))
        p.register(DistillerSpec("dbl", ("m/diff",), "m/dbl", "test_scale", chunk_pointwidth=chunk_pw))
        p.register(
            DistillerSpec("quad", ("m/dbl",), "m/quad", "test_scale", params={"factor": 2.0}, chunk_pointwidth=chunk_pw)
        )
        return s, p

    def test_no_changes_no_materialization(self):
        s, p = self.setup_chain()
        assert p.propagate() == []
        s.insert("m/V_ang_a", frames(10), np.zeros(10))
        s.insert("m/V_ang_b", frames(10), np.zeros(10))
        assert len(p.propagate()) == 3
        assert p.propagate() == []

    def test_chain_equals_composition(self):
        s, p = self.setup_chain()
        rng = np.random.default_rng(0)
        a, b = rng.uniform(-3, 3, 500), rng.uniform(-3, 3, 500)
        s.insert("m/V_ang_a", frames(500), a)
        s.insert("m/V_ang_b", frames(500), b)
        p.propagate()
        np.testing.assert_array_equal(s.query_raw("m/quad")[1], wrap_angles(a - b) * 2.0 * 2.0)

    def test_single_batch_recomputes_locally(self):
        s, p = self.setup_chain()
        s.insert("m/V_ang_a", frames(2000), np.zeros(2000))
        s.insert("m/V_ang_b", frames(2000), np.full(2000, 0.1))
        p.propagate()
        before = s.query_raw("m/diff")
        s.insert("m/V_ang_a", frames(5, start=1000 * DT), np.full(5, 0.3))
        mats = p.propagate()
        span = sum(b - a for a, b in mats[0].ranges)
        assert span <= 16 * (1 << 22)  # five frames plus widening, not the whole stream
        after = s.query_raw("m/diff")
        np.testing.assert_array_equal(after[0], before[0])
        changed = np.flatnonzero(after[1] != before[1])
        np.testing.assert_array_equal(changed, np.arange(1000, 1005))
        np.testing.assert_array_equal(after[1], p.recompute_full("diff")[1])

    def test_kernel_version_bump_recomputes_everything(self):
        s, p = self.setup_chain()
        s.insert("m/V_ang_a", frames(300), np.zeros(300))
        s.insert("m/V_ang_b", frames(300), np.ones(300))
        p.propagate()
        before = s.query_raw("m/dbl")
        p.bump_kernel_version("dbl")
        mats = p.propagate()
        assert [m.distiller for m in mats] == ["dbl", "quad"]
        assert mats[0].full
        covered = sum(b - a for a, b in mats[0].ranges)
        assert covered >= 300 * DT
        after = s.query_raw("m/dbl")
        np.testing.assert_array_equal(after[0], before[0])
        np.testing.assert_array_equal(after[1], before[1])

    def test_join_skips_and_counts_unmatched(self):
        s = Store()
        s.insert("m/V_ang_a", frames(100), np.zeros(100))
        s.insert("m/V_ang_b", frames(50), np.zeros(50))
        p = Pipeline(s)
        p.register(DistillerSpec("d", ("m/V_ang_a", "m/V_ang_b"), "m/d", "angle_difference"))
        (m,) = p.propagate()
        assert m.unmatched == 50
        assert s.query_raw("m/d")[0].size == 50

    def test_failed_chunk_quarantined(self):
        s = Store()
        vals = np.ones(400)
        vals[200] = -1.0
        s.insert("m/x", frames(400), vals)
        p = Pipeline(s)
        p.register(DistillerSpec("f", ("m/x",), "m/y", "test_fragile"))
        (m,) = p.propagate()
        assert len(m.failed) == 1
        a, b, why = m.failed[0]
        assert a <= 200 * DT < b and "ArithmeticError" in why
        t, _ = s.query_raw("m/y")
        assert t.size == 399 and 200 * DT not in t

    def test_lineage_and_replay(self):
        s, p = self.setup_chain()
        rng = np.random.default_rng(3)
        for k in range(4):
            t = frames(100, start=k * 150 * DT)
            s.insert("m/V_ang_a", t, rng.normal(size=100))
            s.insert("m/V_ang_b", t, rng.normal(size=100))
            p.propagate()
        s.insert("m/V_ang_a", frames(30, start=120 * DT), rng.normal(size=30))
        p.propagate()
        for name, out in (("diff", "m/diff"), ("quad", "m/quad")):
            rt, rv = p.replay(name)
            t, v = s.query_raw(out)
            np.testing.assert_array_equal(rt, t)
            np.testing.assert_array_equal(rv, v)
            for x in t[::37]:
                m = p.lineage(out, int(x))
                assert m is not None and m.output_version is not None


class TestKernels:
    def test_join_tie_prefers_earlier(self):
        keep, (v,) = join_nearest(np.array([10]), [(np.array([5, 15]), np.array([1.0, 2.0]))], 5)
        assert keep[0] and v[0] == 1.0

    def test_real_power(self):
        t = np.arange(3)
        _, p = KERNELS["real_power"].fn(t, [np.full(3, 100.0), np.zeros(3), np.full(3, 2.0), np.full(3, -math.pi / 3)])
        np.testing.assert_allclose(p, 100.0)

    def test_frequency_deviation_recovers_slope(self):
        t = frames(240)
        df = 0.05
        ang = wrap_angles(2 * np.pi * df * t * 1e-9 + 3.0)
        ot, f = frequency_deviation(t, [ang])
        np.testing.assert_allclose(f, df, rtol=1e-9)
        assert ot[0] == t[3]

    def test_magnitude_correlation(self):
        rng = np.random.default_rng(1)
        t = frames(1000)
        x = rng.normal(size=1000)
        ot, c = magnitude_correlation(t, [x, 2 * x + 1])
        np.testing.assert_allclose(c, 1.0, atol=1e-12)
        assert np.all(ot % (1 << 30) == 0)


def _full_oracle(s):
    """Direct composition of the three kernels on the final inputs."""
    ta, va = s.query_raw("m/V_ang_a")
    tb, vb = s.query_raw("m/V_ang_b")
    keep, (pb,) = join_nearest(ta, [(tb, vb)], int(DT / 2))
    d_t, d_v = ta[keep], wrap_angles(va[keep] - pb[keep])
    f_t, f_v = frequency_deviation(d_t, [d_v])
    m_t, m_v = magnitude_correlation(d_t, [d_v, va[keep]], window_ns=1 << 28)
    return (d_t, d_v), (f_t, f_v), (m_t, m_v)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(
        st.tuples(st.sampled_from(["a", "b"]), st.integers(0, 400), st.integers(1, 60), st.integers(0, 1000), st.booleans()),
        min_size=1,
        max_size=8,
    )
)
def test_incremental_equals_full(ops):
    s = Store(leaf_capacity=64)
    s.create_stream("m/V_ang_a")
    s.create_stream("m/V_ang_b")
    p = Pipeline(s)
    p.register(DistillerSpec("diff", ("m/V_ang_a", "m/V_ang_b"), "m/diff", "angle_difference"))
    p.register(DistillerSpec("freq", ("m/diff",), "m/freq", "frequency_deviation"))
    p.register(
        DistillerSpec("corr", ("m/diff", "m/V_ang_a"), "m/corr", "magnitude_correlation", params={"window_ns": 1 << 28})
    )
    for which, start, n, seed, run in ops:
        rng = np.random.default_rng(seed)
        jitter = rng.integers(-DT // 3, DT // 3, n)
        s.insert(f"m/V_ang_{which}", frames(n, start=start * DT, jitter=jitter), rng.uniform(-3, 3, n))
        if run:
            p.propagate()
    p.propagate()
    expected = _full_oracle(s)
    for key, (et, ev) in zip(("m/diff", "m/freq", "m/corr"), expected):
        t, v = s.query_raw(key)
        np.testing.assert_array_equal(t, et)
        np.testing.assert_array_equal(v, ev)
    assert p.propagate() == []
