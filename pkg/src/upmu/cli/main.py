"""``upmu`` command line.

Exit codes: 0 success, 1 internal error, 2 invalid input (including bad
arguments and scenario files), 3 runtime failure of an analysis or the
store, 4 something named on the command line does not exist.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .. import __version__
from ..distil import DistillerSpec, Pipeline
from ..errors import NotFound, UpmuError, ValidationError
from ..store import ENV_VAR, Store, StreamKey
from ..store.store import T_MAX, T_MIN
from . import analyses
from .analyses import Context, Report
from .archive import ingest, read_archive, write_archive
from .reports import dumps, render_csv, render_table, render_text, report_document, write_report
from .runner import (
    ARCHIVE_NAME,
    EXIT_OK,
    EXIT_VALIDATION,
    exit_code_for,
    register_distillers,
    resolve_store,
    run_scenario,
    simulate,
)
from .scenario import DIAGNOSTIC_SCHEMAS, bundled_path, bundled_scenarios, check, load_scenario, parse_yaml, validate_diagnostic

PLOT_COLUMNS = ["window_start_ns", "min", "max", "mean", "count"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--store", help=f"store directory (default: ${ENV_VAR})")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "text"), default="text", help="stdout format")
    return p


def _scenario_path(arg: str) -> Path:
    p = Path(arg)
    if p.exists() or p.suffix in (".yaml", ".yml"):
        return p
    if arg.replace("-", "_") in bundled_scenarios():
        return bundled_path(arg)
    raise NotFound(f"no scenario file {arg!r} and no bundled scenario of that name "
                   f"(bundled: {', '.join(bundled_scenarios())})")


def _emit(args, columns, rows, text: str | None = None) -> None:
    if args.format == "csv":
        sys.stdout.write(render_csv(columns, rows))
    else:
        sys.stdout.write(text if text is not None else render_table(columns, rows))


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args) -> int:
    sc = load_scenario(_scenario_path(args.scenario))
    seed = sc.seed if args.seed is None else args.seed
    out = Path(args.out or sc.output or ".")
    tel = simulate(sc, seed)
    path = write_archive(out / (args.archive or ARCHIVE_NAME), tel, sc.meters,
                         {"scenario": sc.name, "scenario_hash": sc.digest, "seed": seed})
    print(f"wrote {path}: {tel.timestamps.size} frames, {len(sc.meters)} meters, {int(tel.gap.sum())} gap frames")
    return EXIT_OK


def cmd_ingest(args) -> int:
    ts, streams, _ = read_archive(args.archive)
    store = Store(resolve_store(args.store))
    try:
        versions = ingest(store, ts, streams)
    finally:
        store.close()
    _emit(args, ["stream", "version"], sorted(versions.items()))
    return EXIT_OK


def _pipeline(args, readonly=False) -> tuple[Store, Pipeline]:
    path = resolve_store(args.store)
    if readonly and not path.exists():
        raise NotFound(f"no store at {path}")
    store = Store(path, readonly=readonly)
    return store, Pipeline(store)


def _params(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"--param {item!r}: expected key=value")
        out[key] = parse_yaml(value, f"--param {key}")
    return out


def cmd_distill(args) -> int:
    if args.action == "register":
        store, pipe = _pipeline(args)
        try:
            doc = {"name": args.name, "kernel": args.kernel, "inputs": args.input, "output": args.output,
                   "params": _params(args.param)}
            if args.chunk_pointwidth is not None:
                doc["chunk_pointwidth"] = args.chunk_pointwidth
            register_distillers(pipe, [doc])
        finally:
            store.close()
        print(f"registered {args.name}: {', '.join(args.input)} -> {args.output} ({args.kernel})")
        return EXIT_OK
    if args.action == "run":
        store, pipe = _pipeline(args)
        try:
            mats = pipe.propagate()
        finally:
            store.close()
        rows = [(m.distiller, m.output_version, len(m.ranges), len(m.failed), m.unmatched) for m in mats]
        _emit(args, ["distiller", "output_version", "ranges", "failed_chunks", "unmatched"], rows)
        return EXIT_OK
    store, pipe = _pipeline(args, readonly=True)
    if args.action == "list":
        rows = []
        for name in pipe.order():
            s = pipe.specs[name]
            st = pipe.state[name]
            rows.append((name, s.kernel, s.kernel_version, " ".join(s.inputs), s.output,
                         " ".join(f"{k}@{v}" for k, v in sorted(st.consumed.items()))))
        _emit(args, ["distiller", "kernel", "kernel_version", "inputs", "output", "consumed"], rows)
        return EXIT_OK
    m = pipe.lineage(args.stream, args.time_ns)
    if m is None:
        raise NotFound(f"no materialization of {args.stream} covers t = {args.time_ns}")
    sys.stdout.write(dumps(m.__dict__) if args.format == "text" else render_csv(
        ["distiller", "kernel_version", "output_version", "input_versions"],
        [(m.distiller, m.kernel_version, m.output_version,
          " ".join(f"{k}:{a}->{b}" for k, (a, b) in sorted(m.input_versions.items())))]))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    sc = load_scenario(_scenario_path(args.model))
    d = {"kind": args.kind, "name": args.name or args.kind, **_params(args.param)}
    if args.window:
        d["window"] = list(args.window)
    check(d, DIAGNOSTIC_SCHEMAS[args.kind], "diagnose")
    validate_diagnostic(d, sc.model, sc.simulation, sc.meters, "diagnose")
    if args.kind == "requirements":
        rep = analyses.run_requirements(None, d)
    else:
        store = Store(resolve_store(args.store), readonly=True)
        rep = analyses.RUNNERS[args.kind](Context(store, sc.model, sc.simulation, sc.meters), d)
    return _finish_report(args, rep)


def _finish_report(args, rep: Report) -> int:
    if args.out:
        files = write_report(rep, Path(args.out))
        print(f"wrote {', '.join(str(Path(args.out) / f) for f in files.values())}", file=sys.stderr)
    if args.format == "csv":
        sys.stdout.write(render_csv(rep.columns, rep.rows))
    elif args.json:
        sys.stdout.write(dumps(report_document(rep)))
    else:
        sys.stdout.write(render_text(rep))
    return EXIT_OK


def cmd_check_reqs(args) -> int:
    from ..diagnostics.requirements import USE_CASES

    if args.list:
        rows = [(uc.name, uc.application, uc.tve_limit, uc.latency_limit, uc.device_class.name)
                for uc in USE_CASES.values()]
        _emit(args, ["use_case", "application", "tve_limit_percent", "latency_limit_s", "device_class"], rows)
        return EXIT_OK
    if not args.use_case:
        raise ValidationError("--use-case is required (see --list)")
    rep = analyses.requirements_report("requirements", args.use_case, tve_percent=args.tve, latency_s=args.latency,
                                       report_rate_hz=args.report_rate, angle_resolution_mdeg=args.angle_resolution)
    return _finish_report(args, rep)


def export_rows(store: Store, stream: str, t0: int | None, t1: int | None, pointwidth: int | None,
                version: int | None = None) -> list[tuple]:
    """Rows for the plot CSV: one per raw point, or one per non-empty window."""
    key = StreamKey.parse(stream)
    if not store.has_stream(key):
        raise NotFound(f"unknown stream {key}")
    lo = T_MIN if t0 is None else t0
    hi = T_MAX if t1 is None else t1
    if pointwidth is None:
        t, v = store.query_raw(key, lo, hi, version)
        return [(int(a), float(b), float(b), float(b), 1) for a, b in zip(t, v)]
    if t0 is None or t1 is None:
        t, _ = store.query_raw(key, lo, hi, version)
        if t.size == 0:
            return []
        lo = int(t[0]) if t0 is None else t0
        hi = int(t[-1]) + 1 if t1 is None else t1
    pts = store.query_windows(key, lo, hi, pointwidth, version)
    return [(p.window_start, p.min, p.max, p.mean, p.count) for p in pts if p.count]


def cmd_export_plot(args) -> int:
    store = Store(resolve_store(args.store), readonly=True)
    rows = export_rows(store, args.stream, args.t0, args.t1, args.pointwidth, args.version)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        suffix = "raw" if args.pointwidth is None else f"pw{args.pointwidth}"
        path = out / f"{args.stream.replace('/', '__')}.{suffix}.csv"
        path.write_text(render_csv(PLOT_COLUMNS, rows))
        print(f"wrote {path} ({len(rows)} rows)", file=sys.stderr)
    else:
        _emit(args, PLOT_COLUMNS, rows)
    return EXIT_OK


def cmd_inspect(args) -> int:
    store = Store(resolve_store(args.store), readonly=True)
    if args.stream:
        key = StreamKey.parse(args.stream)
        latest = store.latest_version(key)
        rows = []
        for v in range(1, latest + 1):
            s = store.summary(key, v)
            rows.append((v, s.count, s.min, s.max, s.mean))
        _emit(args, ["version", "count", "min", "max", "mean"], rows)
        return EXIT_OK
    rows = []
    for key in store.streams():
        s = store.summary(key)
        rows.append((str(key), store.latest_version(key), s.count, s.min, s.max, s.mean))
    _emit(args, ["stream", "version", "count", "min", "max", "mean"], rows)
    return EXIT_OK


def cmd_run(args) -> int:
    if args.list:
        for name in bundled_scenarios():
            print(name)
        return EXIT_OK
    if not args.scenario:
        raise ValidationError("a scenario file or bundled scenario name is required")
    sc = load_scenario(_scenario_path(args.scenario))
    out = Path(args.out or sc.output or Path("upmu_out") / sc.name)
    store = resolve_store(args.store, out / "store")
    man, code = run_scenario(sc, out, store, args.seed)
    sys.stdout.write(dumps(man.to_dict()) if args.json else man.to_text())
    return code


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = _Parser(prog="upmu", description="Micro-synchrophasor simulation, storage and diagnostics.")
    p.add_argument("--version", action="version", version=f"upmu {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="simulate a scenario into a telemetry archive")
    s.add_argument("scenario", help="scenario file or bundled scenario name")
    s.add_argument("--archive", help=f"archive file name inside --out (default {ARCHIVE_NAME})")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("ingest", parents=[common], help="insert a telemetry archive into the store")
    s.add_argument("archive")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("distill", parents=[common], help="register, run and inspect distillers")
    dsub = s.add_subparsers(dest="action", required=True, parser_class=_Parser)
    r = dsub.add_parser("register", parents=[common])
    r.add_argument("--name", required=True)
    r.add_argument("--kernel", required=True)
    r.add_argument("--input", action="append", required=True, help="input stream meter/channel (repeat)")
    r.add_argument("--output", required=True)
    r.add_argument("--param", action="append", help="kernel parameter key=value (repeat)")
    r.add_argument("--chunk-pointwidth", type=int)
    dsub.add_parser("run", parents=[common])
    dsub.add_parser("list", parents=[common])
    lin = dsub.add_parser("lineage", parents=[common])
    lin.add_argument("stream")
    lin.add_argument("time_ns", type=int)
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("diagnose", parents=[common], help="run one diagnostic over stored streams")
    s.add_argument("kind", choices=sorted(DIAGNOSTIC_SCHEMAS))
    s.add_argument("--model", required=True, help="scenario file supplying the feeder model and time base")
    s.add_argument("--window", nargs=2, type=float, metavar=("T0", "T1"), help="seconds from the scenario start")
    s.add_argument("--param", action="append", help="diagnostic parameter key=value, value in YAML (repeat)")
    s.add_argument("--name", help="report name")
    s.add_argument("--json", action="store_true", help="print the structured report instead of text")
    s.set_defaults(fn=cmd_diagnose)

    s = sub.add_parser("check-reqs", parents=[common], help="check stream quality against a use case")
    s.add_argument("--use-case")
    s.add_argument("--tve", type=float, help="total vector error, percent")
    s.add_argument("--latency", type=float, help="seconds")
    s.add_argument("--report-rate", type=float, help="reports per second")
    s.add_argument("--angle-resolution", type=float, help="millidegrees")
    s.add_argument("--list", action="store_true", help="list use cases and limits")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_check_reqs)

    s = sub.add_parser("export-plot", parents=[common], help="write window statistics of a stream as CSV")
    s.add_argument("stream", help="meter/channel")
    s.add_argument("--t0", type=int, help="start, ns (inclusive)")
    s.add_argument("--t1", type=int, help="end, ns (exclusive)")
    s.add_argument("--pointwidth", type=int, help="window width 2**pw ns; omit for raw points")
    s.add_argument("--version", type=int, help="stream version (default latest)")
    s.set_defaults(fn=cmd_export_plot)

    s = sub.add_parser("inspect", parents=[common], help="list streams or the versions of one stream")
    s.add_argument("stream", nargs="?")
    s.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("run", parents=[common], help="run a scenario end to end")
    s.add_argument("scenario", nargs="?", help="scenario file or bundled scenario name")
    s.add_argument("--list", action="store_true", help="list bundled scenarios")
    s.add_argument("--json", action="store_true", help="print the manifest as JSON")
    s.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UpmuError as exc:
        print(f"upmu {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except FileNotFoundError as exc:
        print(f"upmu {args.command}: {exc}", file=sys.stderr)
        return exit_code_for(NotFound(str(exc)))
