import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from upmu.cli import load_scenario, main, parse_scenario, run_scenario
from upmu.cli.archive import channel_keys, load_streams, read_archive
from upmu.cli.main import PLOT_COLUMNS, export_rows
from upmu.cli.scenario import bundled_path, bundled_scenarios
from upmu.errors import NotFound, ValidationError
from upmu.store import Store, StreamKey

FRAME_S = 1.0 / 120.0


def cli(capsys, *argv):
    code = main(list(map(str, argv)))
    out = capsys.readouterr()
    return code, out.out, out.err


def read_csv(text):
    return list(csv.reader(io.StringIO(text)))


def minimal_yaml(**over):
    doc = {
        "schema_version": 1,
        "name": "tiny",
        "seed": 3,
        "model": {"library": "two_bus_line"},
        "simulation": {"duration": 1.0, "profiles": {"sigma": 0.01, "spread": 0.2}},
    }
    doc.update(over)
    return json.dumps(doc)


# -- scenario validation ----------------------------------------------------

class TestScenarioValidation:
    def test_bundled_scenarios_parse(self):
        assert {"minimal", "paper_walkthrough"} <= set(bundled_scenarios())
        for name in bundled_scenarios():
            sc = load_scenario(bundled_path(name))
            assert sc.meters

    def test_hyphenated_bundled_name(self):
        assert bundled_path("paper-walkthrough") == bundled_path("paper_walkthrough")

    def test_unknown_top_level_key_names_location(self):
        with pytest.raises(ValidationError, match="scenario.*bogus"):
            parse_scenario(minimal_yaml(bogus=1))

    def test_nested_error_names_path(self):
        text = minimal_yaml(simulation={"duration": -1.0})
        with pytest.raises(ValidationError, match=r"scenario\.simulation\.duration"):
            parse_scenario(text)

    def test_ratio_errors_parsed_and_bounded(self):
        sc = parse_scenario(minimal_yaml(simulation={"duration": 1.0, "noise": {"pt_ratio_error": 0.01}}))
        assert sc.simulation.pt_ratio_error == 0.01 and sc.simulation.ct_ratio_error == 0.0
        with pytest.raises(ValidationError, match=r"scenario\.simulation\.noise"):
            parse_scenario(minimal_yaml(simulation={"duration": 1.0, "noise": {"ct_ratio_error": -1.0}}))

    def test_schema_version_required(self):
        doc = json.loads(minimal_yaml())
        del doc["schema_version"]
        with pytest.raises(ValidationError, match="schema_version"):
            parse_scenario(json.dumps(doc))

    def test_unsupported_schema_version(self):
        with pytest.raises(ValidationError, match="schema_version"):
            parse_scenario(minimal_yaml(schema_version=7))

    def test_unknown_meter_in_diagnostic(self):
        text = minimal_yaml(diagnostics=[{"kind": "reverse_flow", "name": "rf", "meter": "nope"}])
        with pytest.raises(ValidationError, match=r"diagnostics\[0\]"):
            parse_scenario(text)

    def test_duplicate_keys_rejected(self):
        text = "schema_version: 1\nname: a\nname: b\nmodel: {library: two_bus_line}\nsimulation: {duration: 1.0}\n"
        with pytest.raises(ValidationError, match="duplicate"):
            parse_scenario(text)

    def test_validation_happens_before_execution(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text(minimal_yaml(diagnostics=[{"kind": "nope", "name": "x"}]))
        code, _, err = cli(capsys, "run", bad, "--out", tmp_path / "out")
        assert code == 2
        assert "diagnostics[0]" in err
        assert not (tmp_path / "out").exists()

    def test_missing_file_is_not_found(self):
        with pytest.raises(NotFound):
            load_scenario("/nonexistent/scenario.yaml")


# -- end-to-end runs --------------------------------------------------------

class TestRun:
    def test_minimal_manifest_has_every_channel(self, tmp_path):
        sc = load_scenario(bundled_path("minimal"))
        man, code = run_scenario(sc, tmp_path)
        assert code == 0 and man.ok
        expected = {str(k) for m in sc.meters for k in channel_keys(m)}
        assert set(man.stream_versions) == expected
        assert len(expected) == 12 * len(sc.meters)
        assert all(v == 1 for v in man.stream_versions.values())
        doc = json.loads((tmp_path / "manifest.json").read_text())
        assert doc["scenario_hash"] == sc.digest
        assert doc["tool_version"] == man.tool_version
        assert (tmp_path / "manifest.txt").read_text().startswith("scenario")

    def test_identical_runs_are_byte_identical(self, tmp_path):
        sc = load_scenario(bundled_path("paper_walkthrough"))
        a, b = tmp_path / "a", tmp_path / "b"
        ma, _ = run_scenario(sc, a)
        mb, _ = run_scenario(sc, b)
        da, db = ma.to_dict(), mb.to_dict()
        da.pop("created_at")
        db.pop("created_at")
        assert da == db
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "manifest.json"
                       and p.name != "manifest.txt" and "store" not in p.parts)
        assert files
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        sa, sb = Store(a / "store", readonly=True), Store(b / "store", readonly=True)
        for key in sa.streams():
            ta, va = sa.query_raw(key)
            tb, vb = sb.query_raw(key)
            assert ta.tobytes() == tb.tobytes() and va.tobytes() == vb.tobytes()

    def test_seed_changes_streams(self, tmp_path):
        sc = load_scenario(bundled_path("minimal"))
        run_scenario(sc, tmp_path / "a", seed=1)
        run_scenario(sc, tmp_path / "b", seed=2)
        assert (tmp_path / "a" / "telemetry.zip").read_bytes() != (tmp_path / "b" / "telemetry.zip").read_bytes()

    def test_failed_diagnostic_recorded_and_others_continue(self, tmp_path, capsys):
        path = tmp_path / "s.yaml"
        path.write_text(minimal_yaml(diagnostics=[
            # the telemetry holds no fault, so localisation fails at run time
            {"kind": "fault", "name": "nofault", "prefault": [0.0, 0.4], "during": [0.5, 0.9]},
            {"kind": "reverse_flow", "name": "rf", "meter": "m_sub"},
        ]))
        code, out, _ = cli(capsys, "run", path, "--out", tmp_path / "out", "--json")
        man = json.loads(out)
        assert code == 3
        assert man["failed_stage"] == "diagnose:nofault"
        assert man["reports"]["nofault"]["status"] == "failed"
        assert "NoFaultDetected" in man["reports"]["nofault"]["error"]
        assert man["reports"]["rf"]["status"] == "ok"
        assert (tmp_path / "out" / "reports" / "rf.csv").exists()

    def test_run_list_and_unknown_name(self, tmp_path, capsys):
        code, out, _ = cli(capsys, "run", "--list")
        assert code == 0 and "paper_walkthrough" in out.split()
        code, _, err = cli(capsys, "run", "no_such_scenario", "--out", tmp_path)
        assert code == 4 and "no_such_scenario" in err


@pytest.fixture(scope="module")
def walkthrough(tmp_path_factory):
    out = tmp_path_factory.mktemp("walkthrough")
    man, code = run_scenario(load_scenario(bundled_path("paper-walkthrough")), out)
    assert code == 0, man.stages

    def report(name):
        return json.loads((out / "reports" / f"{name}.json").read_text())["result"]

    return man, report, out


class TestWalkthrough:
    def test_all_stages_ok(self, walkthrough):
        man, _, _ = walkthrough
        assert man.ok
        assert all(s["status"] == "ok" for s in man.stages)
        assert set(man.distillers) == {"dang_b3", "p_sub", "p_sub_copy"}

    def test_impedance(self, walkthrough):
        _, report, _ = walkthrough
        assert report("impedance_L1")["relative_error_vs_model"] <= 0.13
        assert report("impedance_T1")["relative_error_vs_model"] <= 0.15

    def test_phase_id(self, walkthrough):
        r = walkthrough[1]("phase_id_s1")
        assert r["mapping"] == {"a": "a", "b": "b", "c": "c"}
        assert r["offset_deg"] == -30

    def test_topology_follows_switching(self, walkthrough):
        _, report, _ = walkthrough
        before, after = report("topology_before"), report("topology_after")
        assert before["winner"] == "via_S1" and before["shares"]["via_S1"] >= 0.95
        assert after["winner"] == "via_S2" and after["shares"]["via_S2"] >= 0.95

    def test_switch_change_point(self, walkthrough):
        pts = walkthrough[1]("switch_b3")["change_points_s"]
        assert len(pts) == 1
        assert abs(pts[0] - 30.0) <= 2 * FRAME_S

    def test_kpca_flags_the_sags(self, walkthrough):
        r = walkthrough[1]("kpca_sags")
        sags = [(t, t + 0.25) for t in (17.0, 20.0, 23.0, 26.0)]
        flagged = r["flagged_windows_s"]
        hits = [w for w in flagged if any(w[0] < b and w[1] > a for a, b in sags)]
        found = [s for s in sags if any(w[0] < s[1] and w[1] > s[0] for w in flagged)]
        assert len(hits) / len(flagged) >= 0.9
        assert len(found) / len(sags) >= 0.9

    def test_state_estimators_agree(self, walkthrough):
        _, report, _ = walkthrough
        lin, wls = report("se_linear")["voltages_v"], report("se_wls")["voltages_v"]
        assert lin.keys() == wls.keys()
        for bus in lin:
            a = np.array(lin[bus]) @ [1, 1j]
            b = np.array(wls[bus]) @ [1, 1j]
            assert np.max(np.abs(a - b) / np.abs(b)) < 0.01

    def test_fault_location(self, walkthrough):
        r = walkthrough[1]("fault_L3")
        assert r["branch"] == "L3"
        assert abs(r["distance_fraction"] - 0.6) <= 0.05
        assert r["phases"] == "a"

    def test_reverse_flow_and_requirements(self, walkthrough):
        _, report, _ = walkthrough
        assert max(report("reverse_flow_sub")["reverse_fraction"].values()) == 0.0
        assert report("requirements_se")["passed"] is True

    def test_reports_dual_emitted(self, walkthrough):
        man, _, out = walkthrough
        for name, entry in man.reports.items():
            for kind in ("json", "text", "csv"):
                assert (out / entry[kind]).is_file(), (name, kind)
            header = read_csv((out / entry["csv"]).read_text())[0]
            assert header

    def test_distilled_angle_difference_matches_raw(self, walkthrough):
        man, _, out = walkthrough
        store = Store(out / "store", readonly=True)
        t, v = store.query_raw(StreamKey("m_b3", "dang_a"))
        ta, a = store.query_raw(StreamKey("m_b3", "V_ang_a"))
        tb, b = store.query_raw(StreamKey("m_sub", "V_ang_a"))
        assert t.size == ta.size
        expected = np.angle(np.exp(1j * (a - b)))
        np.testing.assert_allclose(v, expected, atol=1e-12)


# -- subcommands ------------------------------------------------------------

@pytest.fixture
def ingested(tmp_path, capsys):
    out = tmp_path / "sim"
    code, _, _ = cli(capsys, "simulate", "minimal", "--out", out)
    assert code == 0
    store = tmp_path / "store"
    code, text, _ = cli(capsys, "ingest", out / "telemetry.zip", "--store", store, "--format", "csv")
    assert code == 0
    return store, out / "telemetry.zip", read_csv(text)


class TestSubcommands:
    def test_simulate_ingest_round_trip(self, ingested):
        store_path, archive, rows = ingested
        assert rows[0] == ["stream", "version"]
        assert len(rows) - 1 == 24
        ts, streams, meta = read_archive(archive)
        assert meta["scenario"] == "minimal"
        sc = load_scenario(bundled_path("minimal"))
        store = Store(store_path, readonly=True)
        grid, back = load_streams(store, sc.model, list(streams), int(ts[0]), int(ts[-1]) + 1)
        np.testing.assert_array_equal(grid, ts)
        for mid, ms in streams.items():
            np.testing.assert_allclose(back[mid].voltage, ms.voltage, rtol=1e-12)
            np.testing.assert_allclose(back[mid].current, ms.current, rtol=1e-12)

    def test_store_from_environment(self, tmp_path, capsys, monkeypatch):
        cli(capsys, "simulate", "minimal", "--out", tmp_path)
        monkeypatch.setenv("UPMU_STORE", str(tmp_path / "envstore"))
        code, _, _ = cli(capsys, "ingest", tmp_path / "telemetry.zip")
        assert code == 0 and (tmp_path / "envstore").exists()

    def test_missing_store_is_validation_error(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("UPMU_STORE", raising=False)
        cli(capsys, "simulate", "minimal", "--out", tmp_path)
        code, _, err = cli(capsys, "ingest", tmp_path / "telemetry.zip")
        assert code == 2 and "--store" in err

    def test_inspect(self, ingested, capsys):
        store, _, _ = ingested
        code, text, _ = cli(capsys, "inspect", "--store", store, "--format", "csv")
        rows = read_csv(text)
        assert code == 0 and rows[0][:3] == ["stream", "version", "count"]
        assert len(rows) == 25
        code, text, _ = cli(capsys, "inspect", "m_sub/V_mag_a", "--store", store, "--format", "csv")
        assert read_csv(text)[1][:2] == ["1", "120"]

    def test_distill_register_run_list_lineage(self, ingested, capsys):
        store, _, _ = ingested
        code, _, _ = cli(capsys, "distill", "register", "--store", store, "--name", "dang", "--kernel",
                         "angle_difference", "--input", "m_load/V_ang_a", "--input", "m_sub/V_ang_a",
                         "--output", "m_load/dang")
        assert code == 0
        code, text, _ = cli(capsys, "distill", "run", "--store", store, "--format", "csv")
        rows = read_csv(text)
        assert code == 0 and rows[1][:2] == ["dang", "1"]
        code, text, _ = cli(capsys, "distill", "list", "--store", store, "--format", "csv")
        assert read_csv(text)[1][:2] == ["dang", "angle_difference"]
        t, _ = Store(store, readonly=True).query_raw(StreamKey("m_load", "dang"))
        code, text, _ = cli(capsys, "distill", "lineage", "m_load/dang", int(t[5]), "--store", store)
        assert code == 0 and json.loads(text)["distiller"] == "dang"
        code, _, _ = cli(capsys, "distill", "lineage", "m_load/dang", int(t[-1]) + 10**12, "--store", store)
        assert code == 4

    def test_distill_register_unknown_kernel(self, ingested, capsys):
        store, _, _ = ingested
        code, _, err = cli(capsys, "distill", "register", "--store", store, "--name", "x", "--kernel", "nope",
                           "--input", "m_load/V_ang_a", "--output", "m_load/x")
        assert code == 4 and "nope" in err

    def test_diagnose_reverse_flow(self, ingested, capsys, tmp_path):
        store, _, _ = ingested
        code, text, _ = cli(capsys, "diagnose", "reverse_flow", "--model", "minimal", "--store", store,
                            "--param", "meter=m_sub", "--json", "--out", tmp_path / "rep")
        assert code == 0
        assert json.loads(text)["result"]["meter"] == "m_sub"
        assert (tmp_path / "rep" / "reverse_flow.csv").exists()

    def test_diagnose_runtime_failure_exit_3(self, ingested, capsys):
        store, _, _ = ingested
        code, _, err = cli(capsys, "diagnose", "fault", "--model", "minimal", "--store", store,
                           "--param", "prefault=[0.0, 0.4]", "--param", "during=[0.5, 0.9]")
        assert code == 3 and "NoFaultDetected" in err

    def test_diagnose_too_few_samples_exit_2(self, ingested, capsys):
        store, _, _ = ingested
        code, _, err = cli(capsys, "diagnose", "impedance", "--model", "minimal", "--store", store,
                           "--param", "branch=L1", "--window", "0", "0.05")
        assert code == 2 and "InsufficientSamples" in err

    def test_diagnose_bad_param_exit_2(self, ingested, capsys):
        store, _, _ = ingested
        code, _, _ = cli(capsys, "diagnose", "reverse_flow", "--model", "minimal", "--store", store,
                         "--param", "meter=ghost")
        assert code == 2

    def test_bad_arguments_exit_2(self, capsys):
        code = None
        with pytest.raises(SystemExit) as exc:
            main(["diagnose", "not_a_kind"])
        code = exc.value.code
        capsys.readouterr()
        assert code == 2

    def test_check_reqs(self, capsys):
        code, text, _ = cli(capsys, "check-reqs", "--list", "--format", "csv")
        rows = read_csv(text)
        assert code == 0 and rows[0][0] == "use_case" and len(rows) > 5
        use_case = rows[1][0]
        code, text, _ = cli(capsys, "check-reqs", "--use-case", use_case, "--tve", "0.01", "--json")
        assert code == 0 and json.loads(text)["result"]["use_case"] == use_case
        code, _, _ = cli(capsys, "check-reqs", "--use-case", "no such use", "--tve", "1")
        assert code in (2, 4)


# -- plot export ------------------------------------------------------------

def brute_windows(t, v, t0, t1, pw):
    w0 = (t0 >> pw) << pw
    rows = []
    for start in range(w0, t1, 1 << pw):
        m = (t >= start) & (t < start + (1 << pw)) & (t >= t0) & (t < t1)
        if m.any():
            rows.append((start, v[m].min(), v[m].max(), v[m].mean(), int(m.sum())))
    return rows


@pytest.fixture
def event_store(tmp_path):
    """One hour of 10 Hz data with a dip lasting a few seconds."""
    rng = np.random.default_rng(7)
    t = np.arange(36_000, dtype=np.int64) * 100_000_000 + 1_700_000_000 * 10**9
    v = 1.0 + 0.001 * rng.standard_normal(t.size)
    v[18_000:18_030] -= 0.1
    store = Store(tmp_path / "store")
    store.insert("m/V_mag_a", t, v)
    store.insert("m/empty", [], [])
    store.close()
    return tmp_path / "store", t, v


class TestExportPlot:
    def test_whole_range_single_row_matches_summary(self, event_store):
        path, t, v = event_store
        store = Store(path, readonly=True)
        rows = export_rows(store, "m/V_mag_a", None, None, 62)
        assert len(rows) == 1
        start, lo, hi, mean, count = rows[0]
        assert count == t.size
        assert lo == v.min() and hi == v.max()
        assert mean == pytest.approx(v.mean(), rel=1e-12)

    def test_empty_stream_header_only(self, event_store, capsys):
        path, _, _ = event_store
        for extra in ([], ["--pointwidth", "30"]):
            code, text, _ = cli(capsys, "export-plot", "m/empty", "--store", path, "--format", "csv", *extra)
            assert code == 0
            assert text.splitlines() == [",".join(PLOT_COLUMNS)]

    def test_unknown_stream_not_found(self, event_store, capsys):
        path, _, _ = event_store
        code, _, _ = cli(capsys, "export-plot", "m/nothing", "--store", path)
        assert code == 4

    def test_raw_mode(self, event_store, capsys):
        path, t, v = event_store
        t0, t1 = int(t[100]), int(t[110])
        code, text, _ = cli(capsys, "export-plot", "m/V_mag_a", "--store", path, "--format", "csv",
                            "--t0", t0, "--t1", t1)
        rows = read_csv(text)[1:]
        assert [int(r[0]) for r in rows] == t[100:110].tolist()
        assert all(r[1] == r[2] == r[3] and r[4] == "1" for r in rows)

    @pytest.mark.parametrize("pw, span_s", [(42, 3600), (38, 300), (34, 15), (30, 1)])
    def test_multiscale_views_match_brute_force(self, event_store, tmp_path, capsys, pw, span_s):
        path, t, v = event_store
        centre = int(t[18_015])
        t0, t1 = centre - span_s * 10**9 // 2, centre + span_s * 10**9 // 2
        code, _, _ = cli(capsys, "export-plot", "m/V_mag_a", "--store", path, "--out", tmp_path / "plots",
                         "--t0", t0, "--t1", t1, "--pointwidth", pw)
        assert code == 0
        rows = read_csv((tmp_path / "plots" / f"m__V_mag_a.pw{pw}.csv").read_text())
        assert rows[0] == PLOT_COLUMNS
        got = [(int(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in rows[1:]]
        # the store aligns the range outward to whole windows
        w0, w1 = (t0 >> pw) << pw, -((-t1) >> pw) << pw
        want = brute_windows(t, v, w0, w1, pw)
        assert [g[0] for g in got] == [w[0] for w in want]
        for g, w in zip(got, want):
            assert g[4] == w[4]
            assert g[1] == w[1] and g[2] == w[2]
            assert g[3] == pytest.approx(w[3], rel=1e-12)
        assert min(g[1] for g in got) < 0.95  # the dip is visible at every scale
