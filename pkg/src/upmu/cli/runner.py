"""End-to-end scenario execution: simulate, ingest, distill, diagnose, report."""

from __future__ import annotations

import datetime as _dt
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..distil import DistillerSpec, Pipeline
from ..errors import ComputationError, NotFound, UpmuError, ValidationError
from ..feeder.telemetry import NoiseModel, Telemetry, random_walk_profiles, simulate_telemetry
from ..store import ENV_VAR, Store
from .analyses import RUNNERS, Context
from .archive import ingest, write_archive
from .reports import dumps, write_report
from .scenario import Scenario

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_NOT_FOUND = 4

MANIFEST_JSON = "manifest.json"
MANIFEST_TEXT = "manifest.txt"
ARCHIVE_NAME = "telemetry.zip"


@dataclass
class RunManifest:
    scenario: str
    scenario_hash: str
    seed: int
    tool_version: str
    store: str
    stream_versions: dict = field(default_factory=dict)
    distillers: dict = field(default_factory=dict)  # name -> output version written by this run
    reports: dict = field(default_factory=dict)  # name -> {kind, status, files or error}
    stages: list = field(default_factory=list)  # [{stage, status, detail}]
    failed_stage: str | None = None
    archive: str | None = None
    versions: dict = field(default_factory=dict)  # software versions
    created_at: str = ""  # wall clock, the only field that differs between identical runs

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [
            f"scenario      {self.scenario}",
            f"sha256        {self.scenario_hash}",
            f"seed          {self.seed}",
            f"tool version  {self.tool_version}",
            f"store         {self.store}",
            f"status        {'ok' if self.ok else 'failed at ' + str(self.failed_stage)}",
            "stages:",
            *[f"  {s['stage']:<24} {s['status']}" + (f"  {s['detail']}" if s.get("detail") else "") for s in self.stages],
            f"streams       {len(self.stream_versions)} written (versions in {MANIFEST_JSON})",
        ]
        if self.distillers:
            lines += ["distillers:", *[f"  {k}  v{v}" for k, v in sorted(self.distillers.items())]]
        if self.reports:
            lines.append("reports:")
            for name, r in self.reports.items():
                tail = r.get("text") if r["status"] == "ok" else r.get("error")
                lines.append(f"  {name:<24} {r['status']:<7} {tail}")
        return "\n".join(lines) + "\n"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NotFound):
        return EXIT_NOT_FOUND
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, ComputationError):
        return EXIT_RUNTIME
    return EXIT_INTERNAL


def seeds(seed: int) -> tuple[int, int]:
    """Independent (profile, noise) seeds derived from one scenario seed."""
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def simulate(sc: Scenario, seed: int) -> Telemetry:
    sim = sc.simulation
    n = int(round(sim.duration * sim.rate))
    prof_seed, noise_seed = seeds(seed)
    profiles = None
    if sim.profiles is not None:
        profiles = random_walk_profiles(sc.model, n, seed=prof_seed, **sim.profiles)
    noise = NoiseModel(sim.angle_sigma, sim.magnitude_sigma_pu, noise_seed, sim.pt_ratio_error, sim.ct_ratio_error)
    return simulate_telemetry(sc.model, profiles, noise, sim.events, sim.duration, start_ns=sim.start_ns, rate=sim.rate)


def resolve_store(path: str | None, default: Path | None = None) -> Path:
    p = path or os.environ.get(ENV_VAR)
    if p:
        return Path(p)
    if default is None:
        raise ValidationError(f"no store given: pass --store or set ${ENV_VAR}")
    return default


def register_distillers(pipe: Pipeline, specs: list[dict]) -> None:
    for i, d in enumerate(specs):
        try:
            spec = DistillerSpec(name=d["name"], inputs=tuple(d["inputs"]), output=d["output"], kernel=d["kernel"],
                                 **{k: d[k] for k in ("params", "kernel_version", "tolerance_ns", "chunk_pointwidth")
                                    if k in d})
        except UpmuError as exc:
            raise type(exc)(f"scenario.distillers[{i}]: {exc}") from None
        existing = pipe.specs.get(spec.name)
        if existing is None:
            pipe.register(spec)
        elif existing != spec:
            raise ValidationError(f"scenario.distillers[{i}]: a different distiller named {spec.name} is registered")


def _display_path(p: Path, out_dir: Path) -> str:
    try:
        return str(p.resolve().relative_to(out_dir.resolve()))
    except ValueError:
        return str(p)


def run_scenario(sc: Scenario, out_dir: Path, store_path: Path | None = None, seed: int | None = None) -> tuple[RunManifest, int]:
    """Execute every stage; returns the manifest and the process exit code."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store_path = Path(store_path) if store_path is not None else out_dir / "store"
    seed = sc.seed if seed is None else seed
    man = RunManifest(
        scenario=sc.name,
        scenario_hash=sc.digest,
        seed=seed,
        tool_version=__version__,
        store=_display_path(store_path, out_dir),
        versions={"python": platform.python_version(), "numpy": np.__version__},
        created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )
    code = 0

    def stage(name, fn):
        nonlocal code
        try:
            detail = fn()
        except UpmuError as exc:
            man.stages.append({"stage": name, "status": "failed", "detail": f"{type(exc).__name__}: {exc}"})
            if man.failed_stage is None:
                man.failed_stage = name
                code = exit_code_for(exc)
            return False
        man.stages.append({"stage": name, "status": "ok", "detail": detail or ""})
        return True

    state = {}

    def do_simulate():
        tel = simulate(sc, seed)
        state["tel"] = tel
        path = write_archive(out_dir / ARCHIVE_NAME, tel, sc.meters, {"scenario": sc.name, "scenario_hash": sc.digest,
                                                                      "seed": seed})
        man.archive = _display_path(path, out_dir)
        return f"{tel.timestamps.size} frames, {int(tel.gap.sum())} gap frames"

    def do_ingest():
        tel = state["tel"]
        store = state["store"] = Store(store_path)
        man.stream_versions = ingest(store, tel.timestamps, {m: tel.meters[m] for m in sc.meters})
        return f"{len(man.stream_versions)} streams"

    def do_distill():
        pipe = Pipeline(state["store"])
        register_distillers(pipe, sc.distillers)
        mats = pipe.propagate()
        for m in mats:
            if m.output_version is not None:
                man.distillers[m.distiller] = m.output_version
        failed = [m.distiller for m in mats if m.failed]
        if failed:
            raise ComputationError(f"kernel failures in {sorted(set(failed))}")
        return f"{len(pipe.specs)} distillers"

    ok = stage("simulate", do_simulate) and stage("ingest", do_ingest)
    try:
        if ok and sc.distillers:
            ok = stage("distill", do_distill)
        if ok and sc.diagnostics:
            ctx = Context(state["store"], sc.model, sc.simulation, sc.meters)
            reports_dir = out_dir / "reports"
            for d in sc.diagnostics:
                entry = {"kind": d["kind"]}

                def one(d=d, entry=entry):
                    rep = RUNNERS[d["kind"]](ctx, d)
                    files = write_report(rep, reports_dir)
                    entry.update({k: f"reports/{v}" for k, v in files.items()})

                if stage(f"diagnose:{d['name']}", one):
                    entry["status"] = "ok"
                else:
                    entry["status"] = "failed"
                    entry["error"] = man.stages[-1]["detail"]
                man.reports[d["name"]] = entry
    finally:
        if "store" in state:
            state["store"].close()
    write_manifest(man, out_dir)
    return man, code


def write_manifest(man: RunManifest, out_dir: Path) -> None:
    (out_dir / MANIFEST_JSON).write_text(dumps(man.to_dict()))
    (out_dir / MANIFEST_TEXT).write_text(man.to_text())


def load_manifest(out_dir: Path) -> dict:
    p = Path(out_dir) / MANIFEST_JSON
    if not p.exists():
        raise NotFound(f"no manifest at {p}")
    return json.loads(p.read_text())
