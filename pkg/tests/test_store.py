import pickle
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upmu.errors import BatchConflict, CorruptStore, InvalidPointwidth, NotFound, ValidationError, WriterBusy
from upmu.store import Store, StreamKey, merge_stats
from upmu.store.tree import Internal

KEY = "m1/V_mag_a"


class Oracle:
    """Dict-per-version reference model."""

    def __init__(self):
        self.versions = [{}]

    def insert(self, t, v, erase=None):
        d = dict(self.versions[-1])
        if erase:
            for k in [k for k in d if erase[0] <= k < erase[1]]:
                del d[k]
        d.update(zip((int(x) for x in t), (float(x) for x in v)))
        self.versions.append(d)

    def raw(self, version, t0, t1):
        d = self.versions[version]
        ks = sorted(k for k in d if t0 <= k < t1)
        return ks, [d[k] for k in ks]


def check_aggregates(store, key):
    """Every stored child statistic equals the summary of the child node."""
    tree = store.tree
    for node in tree.walk(store._root(key, None)):
        if isinstance(node, Internal):
            for i in range(64):
                if node.child[i] == 0:
                    assert node.count[i] == 0
                    continue
                s = tree.heap.get(int(node.child[i])).summary()
                assert node.count[i] == s.count
                assert node.ver[i] == s.ver
                if s.count:
                    assert node.vmin[i] == s.vmin and node.vmax[i] == s.vmax
                    assert node.vsum[i] == pytest.approx(s.vsum, rel=1e-12, abs=1e-9)


class TestInsertQuery:
    def test_hundred_points_round_trip(self):
        s = Store()
        t = np.arange(100) * 8_333_333
        v = np.sin(np.arange(100))
        assert s.insert(KEY, t, v) == 1
        qt, qv = s.query_raw(KEY)
        np.testing.assert_array_equal(qt, t)
        np.testing.assert_array_equal(qv, v)

    def test_versions_immutable(self):
        s = Store()
        s.insert(KEY, [1, 2, 3], [1.0, 2.0, 3.0])
        assert s.insert(KEY, [4, 5], [4.0, 5.0]) == 2
        np.testing.assert_array_equal(s.query_raw(KEY, version=1)[0], [1, 2, 3])
        np.testing.assert_array_equal(s.query_raw(KEY, version=2)[0], [1, 2, 3, 4, 5])
        assert s.query_raw(KEY, version=0)[0].size == 0

    def test_out_of_order_batch_sorted(self):
        rng = np.random.default_rng(1)
        t = rng.choice(10**9, 5000, replace=False) - 5 * 10**8
        v = rng.normal(size=t.size)
        s = Store(leaf_capacity=64)
        s.insert(KEY, t, v)
        order = np.argsort(t)
        qt, qv = s.query_raw(KEY)
        np.testing.assert_array_equal(qt, t[order])
        np.testing.assert_array_equal(qv, v[order])

    def test_overwrite_is_last_writer_wins(self):
        s = Store()
        s.insert(KEY, [10, 20], [1.0, 2.0])
        s.insert(KEY, [20, 30], [5.0, 6.0])
        np.testing.assert_array_equal(s.query_raw(KEY)[1], [1.0, 5.0, 6.0])
        np.testing.assert_array_equal(s.query_raw(KEY, version=1)[1], [1.0, 2.0])

    def test_duplicate_in_batch(self):
        with pytest.raises(BatchConflict):
            Store().insert(KEY, [1, 2, 1], [0.0, 0.0, 0.0])

    def test_empty_and_disjoint_ranges(self):
        s = Store()
        s.insert(KEY, [100, 200], [1.0, 2.0])
        assert s.query_raw(KEY, 150, 150)[0].size == 0
        assert s.query_raw(KEY, 300, 400)[0].size == 0
        np.testing.assert_array_equal(s.query_raw(KEY, 100, 200)[0], [100])

    def test_extreme_timestamps(self):
        s = Store(leaf_capacity=2)
        t = np.array([-(2**63), -1, 0, 1, 2**63 - 1], dtype=np.int64)
        s.insert(KEY, t, [1.0, 2.0, 3.0, 4.0, 5.0])
        np.testing.assert_array_equal(s.query_raw(KEY, -(2**63), 2**63 - 1)[0], t[:-1])
        check_aggregates(s, KEY)

    def test_unknown_stream_and_version(self):
        s = Store()
        with pytest.raises(NotFound):
            s.query_raw("nope/V_mag_a")
        s.insert(KEY, [1], [1.0])
        with pytest.raises(NotFound):
            s.query_raw(KEY, version=5)

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            Store().insert(KEY, [1], [np.nan])

    def test_random_ranges_match_linear_scan(self):
        rng = np.random.default_rng(7)
        t = np.cumsum(rng.integers(1, 20_000_000, 10**5))
        v = rng.normal(size=t.size)
        s = Store()
        s.insert(KEY, t, v)
        for _ in range(200):
            a, b = np.sort(rng.integers(t[0] - 10**8, t[-1] + 10**8, 2))
            sel = (t >= a) & (t < b)
            qt, qv = s.query_raw(KEY, a, b)
            np.testing.assert_array_equal(qt, t[sel])
            np.testing.assert_array_equal(qv, v[sel])

    def test_stream_key(self):
        k = StreamKey.parse("m_sub/V_ang_b")
        assert k.is_raw and str(k) == "m_sub/V_ang_b"
        assert not StreamKey("m", "angle_difference").is_raw
        with pytest.raises(ValidationError):
            StreamKey.parse("noslash")


class TestWindows:
    def test_empty_window(self):
        s = Store()
        s.insert(KEY, [0, 1], [1.0, 2.0])
        w = s.query_windows(KEY, 1024, 2048, 10)
        assert len(w) == 1 and w[0].count == 0 and w[0].mean is None

    def test_single_window_is_global(self):
        rng = np.random.default_rng(2)
        t = rng.choice(2**40, 3000, replace=False)
        v = rng.normal(5, 2, t.size)
        s = Store(leaf_capacity=32)
        s.insert(KEY, t, v)
        (w,) = s.query_windows(KEY, 0, 2**62, 62)
        assert w.count == t.size and w.min == v.min() and w.max == v.max()
        assert w.mean == pytest.approx(v.mean(), rel=1e-9)

    def test_outward_alignment(self):
        s = Store()
        s.insert(KEY, [5, 17], [1.0, 3.0])
        w = s.query_windows(KEY, 3, 17, 3)
        assert [p.window_start for p in w] == [0, 8, 16]
        assert [p.count for p in w] == [1, 0, 1]

    def test_every_window_every_pointwidth(self):
        rng = np.random.default_rng(3)
        t = np.sort(rng.choice(2**16, 10**4, replace=False)).astype(np.int64) - 2**15
        v = rng.normal(size=t.size) + 3.0
        s = Store(leaf_capacity=50)
        s.insert(KEY, t[::2], v[::2])
        s.insert(KEY, t[1::2], v[1::2])
        lo, hi = int(t[0]), int(t[-1]) + 1
        for pw in range(0, 63):
            got = s.query_windows(KEY, lo, hi, pw)
            w0 = got[0].window_start
            idx = (t - w0) >> pw
            counts = np.bincount(idx, minlength=len(got))
            assert len(counts) == len(got)
            for k in np.flatnonzero(counts):
                vals = v[idx == k]
                p = got[k]
                assert p.count == vals.size and p.min == vals.min() and p.max == vals.max()
                assert p.mean == pytest.approx(vals.mean(), rel=1e-9)
            assert all(got[k].count == 0 for k in np.flatnonzero(counts == 0))

    def test_merge_equals_brute_force(self):
        rng = np.random.default_rng(4)
        t = np.sort(rng.choice(10**6, 2000, replace=False))
        v = rng.lognormal(size=t.size)
        s = Store(leaf_capacity=16)
        s.insert(KEY, t, v)
        merged = merge_stats(s.query_windows(KEY, 0, 2**20, 12))
        assert merged.count == t.size
        assert merged.mean == pytest.approx(v.mean(), rel=1e-9)
        assert merged.min == v.min() and merged.max == v.max()

    @pytest.mark.parametrize("pw", [-1, 63, 1.5])
    def test_invalid_pointwidth(self, pw):
        s = Store()
        s.insert(KEY, [1], [1.0])
        with pytest.raises(InvalidPointwidth):
            s.query_windows(KEY, 0, 8, pw)


class TestChangedRanges:
    def test_same_version(self):
        s = Store()
        s.insert(KEY, [1, 2], [1.0, 1.0])
        assert s.changed_ranges(KEY, 1, 1, 4) == []

    def test_one_batch(self):
        s = Store()
        s.insert(KEY, [5, 40, 90], [1.0, 1.0, 1.0])
        s.insert(KEY, [1000, 1010, 1100], [2.0, 2.0, 2.0])
        assert s.changed_ranges(KEY, 1, 2, 8) == [(768, 1280)]

    def test_separated_batches(self):
        s = Store()
        s.insert(KEY, [0], [0.0])
        s.insert(KEY, [3000], [1.0])
        s.insert(KEY, [9000], [1.0])
        ranges = s.changed_ranges(KEY, 1, 3, 10)
        assert ranges == [(2048, 3072), (8192, 9216)]

    def test_replace_range_erases_and_reports(self):
        s = Store()
        s.insert(KEY, np.arange(0, 100, 10), np.ones(10))
        s.replace_range(KEY, 20, 60, [25], [9.0])
        np.testing.assert_array_equal(s.query_raw(KEY)[0], [0, 10, 25, 60, 70, 80, 90])
        # erased 20, 30, 40, 50 and wrote 25: windows 16..64 at pointwidth 4
        assert s.changed_ranges(KEY, 1, 2, 4) == [(16, 64)]
        np.testing.assert_array_equal(s.query_raw(KEY, version=1)[0], np.arange(0, 100, 10))

    def test_replace_outside_range_rejected(self):
        s = Store()
        with pytest.raises(ValidationError):
            s.replace_range(KEY, 0, 10, [10], [1.0])

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.lists(st.integers(-(2**40), 2**40), min_size=0, max_size=40, unique=True),
                st.one_of(st.none(), st.tuples(st.integers(-(2**40), 2**40), st.integers(0, 2**38))),
            ),
            min_size=1,
            max_size=6,
        ),
        st.integers(0, 62),
        st.data(),
    )
    def test_sound_and_aligned_complete(self, batches, pw, data):
        s = Store(leaf_capacity=4)
        oracle = Oracle()
        written = [set()]
        for ts, erase in batches:
            vals = np.arange(len(ts), dtype=float) + len(oracle.versions)
            if erase is None:
                s.insert(KEY, ts, vals)
                oracle.insert(ts, vals)
                written.append(set(ts))
            else:
                lo, hi = erase[0], erase[0] + erase[1]
                inside = [x for x in ts if lo <= x < hi]
                v_in = vals[: len(inside)]
                prev = oracle.versions[-1]
                s.replace_range(KEY, lo, hi, inside, v_in)
                oracle.insert(inside, v_in, erase=(lo, hi))
                written.append(set(inside) | {k for k in prev if lo <= k < hi})
        n = len(oracle.versions) - 1
        va = data.draw(st.integers(0, n))
        vb = data.draw(st.integers(va, n))
        ranges = s.changed_ranges(KEY, va, vb, pw)
        before, after = oracle.versions[va], oracle.versions[vb]
        differ = {k for k in set(before) | set(after) if before.get(k) != after.get(k)}
        touched = set().union(*written[va + 1 : vb + 1]) if vb > va else set()

        def covered(x):
            return any(a <= x < b for a, b in ranges)

        assert all(covered(x) for x in differ)
        for a, b in ranges:
            assert a % (1 << pw) == 0 and b % (1 << pw) == 0
            for w in range(a, b, 1 << pw):
                assert any(w <= x < w + (1 << pw) for x in touched)
        assert all(ranges[i][1] < ranges[i + 1][0] for i in range(len(ranges) - 1))
        # raw queries agree with the oracle at every version
        for ver in (va, vb):
            qt, qv = s.query_raw(KEY, version=ver)
            ot, ov = oracle.raw(ver, -(2**63), 2**63 - 1)
            assert qt.tolist() == ot and qv.tolist() == ov
        check_aggregates(s, KEY)


class TestImmutabilityAndConcurrency:
    def test_query_bytes_stable_after_later_inserts(self):
        rng = np.random.default_rng(5)
        s = Store(leaf_capacity=8)
        s.insert(KEY, rng.choice(10**6, 500, replace=False), rng.normal(size=500))
        snap = pickle.dumps((s.query_raw(KEY, version=1), s.query_windows(KEY, 0, 2**20, 14, version=1)))
        for _ in range(5):
            s.insert(KEY, rng.choice(10**6, 300, replace=False), rng.normal(size=300))
        again = pickle.dumps((s.query_raw(KEY, version=1), s.query_windows(KEY, 0, 2**20, 14, version=1)))
        assert snap == again

    def test_single_writer_enforced(self):
        s = Store()
        with s.writer(KEY):
            with pytest.raises(WriterBusy):
                with s.writer(KEY):
                    pass
            with s.writer("m1/V_mag_b") as other:
                other.insert([1], [1.0])

    def test_readers_never_see_partial_inserts(self):
        s = Store(leaf_capacity=16)
        s.insert(KEY, np.arange(1000), np.zeros(1000))
        errors = []
        stop = threading.Event()

        def reader():
            while not stop.is_set():
                v = s.latest_version(KEY)
                t, vals = s.query_raw(KEY, version=v)
                # every batch writes 1000 points all equal to its version
                if t.size != 1000 * v or np.any(np.bincount(vals.astype(int)) % 1000):
                    errors.append((v, t.size))

        threads = [threading.Thread(target=reader) for _ in range(4)]
        for th in threads:
            th.start()
        for k in range(1, 20):
            s.insert(KEY, np.arange(1000) + 1000 * k, np.full(1000, float(k)))
        stop.set()
        for th in threads:
            th.join()
        assert not errors


class TestPersistence:
    def test_reopen(self, tmp_path):
        rng = np.random.default_rng(6)
        t = rng.choice(10**9, 4000, replace=False)
        v = rng.normal(size=t.size)
        with Store(tmp_path, leaf_capacity=64) as s:
            s.insert(KEY, t[:2000], v[:2000])
            s.insert(KEY, t[2000:], v[2000:])
            s.insert("m2/I_mag_a", [1, 2], [3.0, 4.0])
            before = [s.query_windows(KEY, 0, 2**30, 24, version=k) for k in (1, 2)]
        with Store(tmp_path) as s:
            assert s.latest_version(KEY) == 2
            assert [str(k) for k in s.streams()] == ["m1/V_mag_a", "m2/I_mag_a"]
            order = np.argsort(t)
            np.testing.assert_array_equal(s.query_raw(KEY)[0], t[order])
            assert [s.query_windows(KEY, 0, 2**30, 24, version=k) for k in (1, 2)] == before
            assert s.insert(KEY, [5], [5.0]) == 3

    def test_second_writer_process_lock(self, tmp_path):
        with Store(tmp_path):
            with pytest.raises(WriterBusy):
                Store(tmp_path)
            reader = Store(tmp_path, readonly=True)
            assert reader.streams() == []

    def test_reader_refresh(self, tmp_path):
        with Store(tmp_path) as w:
            w.insert(KEY, [1], [1.0])
            r = Store(tmp_path, readonly=True)
            w.insert(KEY, [2], [2.0])
            assert r.latest_version(KEY) == 1
            r.refresh()
            assert r.latest_version(KEY) == 2
            np.testing.assert_array_equal(r.query_raw(KEY)[0], [1, 2])

    def test_torn_tail_dropped(self, tmp_path):
        with Store(tmp_path) as s:
            s.insert(KEY, [1, 2], [1.0, 2.0])
            s.insert(KEY, [3], [3.0])
        data = tmp_path / "store.dat"
        raw = data.read_bytes()
        data.write_bytes(raw[:-7])
        with Store(tmp_path) as s:
            assert s.latest_version(KEY) == 1
            np.testing.assert_array_equal(s.query_raw(KEY)[0], [1, 2])
            assert s.insert(KEY, [4], [4.0]) == 2
        with Store(tmp_path) as s:
            np.testing.assert_array_equal(s.query_raw(KEY)[0], [1, 2, 4])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "store.dat").write_bytes(b"NOTASTORE" * 4)
        with pytest.raises(CorruptStore):
            Store(tmp_path)

    def test_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("UPMU_STORE", str(tmp_path / "s"))
        with Store.from_env() as s:
            s.insert(KEY, [1], [1.0])
        assert (tmp_path / "s" / "store.dat").exists()
