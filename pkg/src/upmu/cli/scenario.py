"""Scenario files: YAML parsing, schema validation and model construction.

A scenario fully validates before anything runs. Every validation error is
prefixed with the location of the offending key, e.g.
``scenario.model.branches[2].miles``.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from ..errors import NotFound, UpmuError, ValidationError
from ..feeder import library
from ..feeder.model import FeederModel, LineBranch, Load, Meter, SwitchBranch, TransformerBranch
from ..feeder.telemetry import _EVENT_PARAMS, DEFAULT_ANGLE_SIGMA, DEFAULT_MAGNITUDE_SIGMA_PU, REPORT_RATE, Event, validate_events

SCHEMA_VERSION = 1
LIBRARY = {
    name: getattr(library, name)
    for name in ("two_bus_line", "transformer_pair", "four_bus_feeder", "switched_six_bus_feeder", "phase_id_feeder",
                 "fault_feeder")
}


class _Loader(yaml.SafeLoader):
    """Safe loader that reads ``1e6`` as a float and rejects duplicate keys."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _mapping(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ValidationError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
        seen.add(key)
    return yaml.SafeLoader.construct_mapping(loader, node, deep)


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG,
                        lambda loader, node: _mapping(loader, node, deep=True))


# -- schema fragments -----------------------------------------------------

NUM = {"type": "number"}
POS = {"type": "number", "exclusiveMinimum": 0}
NONNEG = {"type": "number", "minimum": 0}
RATIO_ERR = {"type": "number", "exclusiveMinimum": -1}
STR = {"type": "string", "minLength": 1}
INT = {"type": "integer"}
PHASE3 = {"type": "array", "items": NUM, "minItems": 3, "maxItems": 3}
MAT3 = {"type": "array", "items": PHASE3, "minItems": 3, "maxItems": 3}
WINDOW = {"type": "array", "items": NUM, "minItems": 2, "maxItems": 2}
IDS = {"type": "array", "items": STR}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


BRANCH_SCHEMAS = {
    "line": _obj({"id": STR, "kind": {"const": "line"}, "from": STR, "to": STR, "miles": POS, "r": MAT3, "x": MAT3},
                 ["id", "kind", "from", "to"]),
    "transformer": _obj({"id": STR, "kind": {"const": "transformer"}, "from": STR, "to": STR, "n_t": POS,
                         "r": PHASE3, "x": PHASE3}, ["id", "kind", "from", "to", "n_t", "r", "x"]),
    "switch": _obj({"id": STR, "kind": {"const": "switch"}, "from": STR, "to": STR, "closed": {"type": "boolean"}},
                   ["id", "kind", "from", "to"]),
}

MODEL_SCHEMA = {
    "type": "object",
    "properties": {
        "library": {"enum": sorted(LIBRARY)},
        "buses": {"type": "array", "items": STR, "minItems": 1},
        "source_bus": STR,
        "v_base": POS,
        "s_base": POS,
        "branches": {"type": "array", "items": {"type": "object", "required": ["kind"],
                                                "properties": {"kind": {"enum": sorted(BRANCH_SCHEMAS)}}}},
        "loads": {"type": "array", "items": _obj({"bus": STR, "p": PHASE3, "q": PHASE3,
                                                  "kind": {"enum": ["power", "current"]}}, ["bus", "p"])},
        "meters": {"type": "array", "items": _obj({"id": STR, "bus": STR, "branch": STR,
                                                   "end": {"enum": ["from", "to"]}}, ["id", "bus"])},
    },
    "additionalProperties": False,
}

SIMULATION_SCHEMA = _obj(
    {
        "duration": POS,
        "start_ns": INT,
        "rate": {"type": "integer", "minimum": 1},
        "profiles": {"oneOf": [{"type": "null"}, _obj({"sigma": NONNEG, "spread": NONNEG, "source_sigma": NONNEG})]},
        "noise": {"oneOf": [{"const": "noiseless"}, _obj({"angle_sigma_deg": NONNEG, "magnitude_sigma_pu": NONNEG,
                                                          "pt_ratio_error": RATIO_ERR, "ct_ratio_error": RATIO_ERR})]},
        "events": {"type": "array", "items": _obj({"time": NONNEG, "kind": {"enum": sorted(_EVENT_PARAMS)},
                                                   "params": {"type": "object"}}, ["time", "kind"])},
    },
    ["duration"],
)

DISTILLER_SCHEMA = _obj(
    {"name": STR, "kernel": STR, "inputs": {"type": "array", "items": STR, "minItems": 1}, "output": STR,
     "params": {"type": "object"}, "kernel_version": {"type": "integer", "minimum": 0},
     "tolerance_ns": {"type": "integer", "minimum": 0}, "chunk_pointwidth": {"type": "integer", "minimum": 0}},
    ["name", "kernel", "inputs", "output"],
)

_COMMON = {"kind": STR, "name": STR, "window": WINDOW,
           "switches": {"type": "object", "additionalProperties": {"type": "boolean"}}}
LOAD_PQ = _obj({"p": PHASE3, "q": PHASE3}, ["p"])

DIAGNOSTIC_SCHEMAS = {
    "impedance": _obj({**_COMMON, "branch": STR, "from_meter": STR, "to_meter": STR, "current_meter": STR,
                       "max_condition": POS}, ["kind", "branch"]),
    "phase_id": _obj({**_COMMON, "reference": STR, "candidate": STR, "angle_gate_deg": POS, "tie_tolerance": NONNEG},
                     ["kind", "reference", "candidate"]),
    "topology": _obj({**_COMMON, "hypotheses": {"type": "array", "minItems": 1,
                                                "items": _obj({"id": STR, "closed": IDS}, ["id", "closed"])},
                      "residual": {"enum": ["complex", "angle", "magnitude"]}, "meters": IDS,
                      "pseudo_loads": {"type": "object", "additionalProperties": LOAD_PQ}}, ["kind"]),
    "switch": _obj({**_COMMON, "meter": STR, "reference": STR, "quantity": {"enum": ["angle", "magnitude"]},
                    "phase": {"enum": ["a", "b", "c"]}, "drift": POS, "threshold": POS,
                    "warmup": {"type": "integer", "minimum": 2}}, ["kind", "meter"]),
    "state_estimation": _obj({**_COMMON, "method": {"enum": ["linear", "wls"]}, "meters": IDS, "at": NONNEG,
                              "prior_sigma_pu": POS}, ["kind"]),
    "kpca": _obj({**_COMMON, "reference": STR, "meters": IDS, "train": WINDOW, "test": WINDOW,
                  "frames_per_window": {"type": "integer", "minimum": 1}, "kernel": {"enum": ["gaussian", "linear"]},
                  "kernel_width": POS, "n_components": {"type": "integer", "minimum": 1},
                  "threshold_quantile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
                 ["kind", "train", "test"]),
    "fault": _obj({**_COMMON, "prefault": WINDOW, "during": WINDOW, "phases": {"type": "string", "pattern": "^[abc]{1,3}$"},
                   "resistance": POS}, ["kind", "prefault", "during"]),
    "reverse_flow": _obj({**_COMMON, "meter": STR, "deadband_pu": NONNEG}, ["kind", "meter"]),
    "requirements": _obj({**_COMMON, "use_case": STR, "tve_percent": NONNEG, "latency_s": NONNEG,
                          "report_rate_hz": NONNEG, "angle_resolution_mdeg": NONNEG}, ["kind", "use_case"]),
}

SCENARIO_SCHEMA = _obj(
    {
        "schema_version": INT,
        "name": STR,
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "model": {"type": "object"},
        "simulation": {"type": "object"},
        "meters": IDS,
        "distillers": {"type": "array", "items": {"type": "object"}},
        "diagnostics": {"type": "array", "items": {"type": "object", "required": ["kind"],
                                                   "properties": {"kind": {"enum": sorted(DIAGNOSTIC_SCHEMAS)}}}},
        "output": STR,
    },
    ["schema_version", "model", "simulation"],
)


def _where(base: str, path) -> str:
    out = base
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def check(instance, schema: dict, where: str) -> None:
    """Raise ValidationError naming the location of the first schema violation."""
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(instance),
                    key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ValidationError(f"{_where(where, err.absolute_path)}: {err.message}")


# -- model ----------------------------------------------------------------

def build_model(doc: dict, where: str = "scenario.model") -> FeederModel:
    check(doc, MODEL_SCHEMA, where)
    if "library" in doc:
        extra = sorted(set(doc) - {"library"})
        if extra:
            raise ValidationError(f"{where}.{extra[0]}: not allowed together with 'library'")
        return LIBRARY[doc["library"]]()
    for key in ("buses", "source_bus", "v_base"):
        if key not in doc:
            raise ValidationError(f"{where}: missing required key {key!r}")
    branches = []
    for i, b in enumerate(doc.get("branches", [])):
        at = f"{where}.branches[{i}]"
        check(b, BRANCH_SCHEMAS[b["kind"]], at)
        try:
            branches.append(_branch(b, at))
        except UpmuError as exc:
            raise ValidationError(f"{at}: {exc}") from None
    loads = []
    for i, ld in enumerate(doc.get("loads", [])):
        value = np.asarray(ld["p"], dtype=float) + 1j * np.asarray(ld.get("q", [0.0, 0.0, 0.0]), dtype=float)
        loads.append(Load(ld["bus"], value, ld.get("kind", "power")))
    meters = [Meter(m["id"], m["bus"], m.get("branch"), m.get("end", "from")) for m in doc.get("meters", [])]
    try:
        return FeederModel(buses=tuple(doc["buses"]), source_bus=doc["source_bus"], v_base=float(doc["v_base"]),
                           branches=tuple(branches), loads=tuple(loads), meters=tuple(meters),
                           s_base=float(doc.get("s_base", 1e6)))
    except UpmuError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def _branch(b: dict, at: str):
    kind = b["kind"]
    if kind == "line":
        if "miles" in b:
            if "r" in b or "x" in b:
                raise ValidationError("give either 'miles' or 'r' and 'x', not both")
            z = library.overhead_line(float(b["miles"]))
        elif "r" in b and "x" in b:
            z = np.asarray(b["r"], dtype=float) + 1j * np.asarray(b["x"], dtype=float)
        else:
            raise ValidationError("a line needs 'miles' or both 'r' and 'x'")
        return LineBranch(b["id"], b["from"], b["to"], z)
    if kind == "transformer":
        z = np.diag(np.asarray(b["r"], dtype=float) + 1j * np.asarray(b["x"], dtype=float))
        return TransformerBranch(b["id"], b["from"], b["to"], float(b["n_t"]), z)
    return SwitchBranch(b["id"], b["from"], b["to"], bool(b.get("closed", True)))


# -- scenario -------------------------------------------------------------

@dataclass
class Simulation:
    duration: float
    start_ns: int = 0
    rate: int = REPORT_RATE
    profiles: dict | None = None
    angle_sigma: float = DEFAULT_ANGLE_SIGMA
    magnitude_sigma_pu: float = DEFAULT_MAGNITUDE_SIGMA_PU
    pt_ratio_error: float = 0.0
    ct_ratio_error: float = 0.0
    events: list[Event] = field(default_factory=list)

    def seconds_to_ns(self, t: float) -> int:
        return self.start_ns + int(round(t * 1e9))


@dataclass
class Scenario:
    name: str
    model: FeederModel
    simulation: Simulation
    seed: int
    meters: tuple[str, ...]
    distillers: list[dict]
    diagnostics: list[dict]
    output: str | None
    digest: str  # sha256 of the file bytes
    source: str = ""


def parse_yaml(text: str, where: str = "scenario"):
    try:
        return yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ValidationError(f"{where}: not valid YAML: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except FileNotFoundError:
        raise NotFound(f"scenario file {p} does not exist") from None
    return parse_scenario(raw, source=str(p))


def parse_scenario(raw: bytes | str, source: str = "") -> Scenario:
    data = raw.encode() if isinstance(raw, str) else raw
    doc = parse_yaml(data.decode("utf-8"))
    if not isinstance(doc, dict):
        raise ValidationError("scenario: top level must be a mapping")
    version = doc.get("schema_version")
    if version is None:
        raise ValidationError("scenario.schema_version: required key missing")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"scenario.schema_version: unsupported version {version!r} (this tool reads {SCHEMA_VERSION})")
    check(doc, SCENARIO_SCHEMA, "scenario")
    model = build_model(doc["model"])
    sim = _simulation(doc["simulation"], model)
    meter_ids = {m.id for m in model.meters}
    selected = tuple(doc.get("meters", [m.id for m in model.meters]))
    for i, mid in enumerate(selected):
        if mid not in meter_ids:
            raise ValidationError(f"scenario.meters[{i}]: unknown meter {mid!r}")
    distillers = []
    for i, d in enumerate(doc.get("distillers", [])):
        check(d, DISTILLER_SCHEMA, f"scenario.distillers[{i}]")
        distillers.append(d)
    diagnostics = []
    names = set()
    for i, d in enumerate(doc.get("diagnostics", [])):
        at = f"scenario.diagnostics[{i}]"
        check(d, DIAGNOSTIC_SCHEMAS[d["kind"]], at)
        d = dict(d)
        d.setdefault("name", f"{d['kind']}_{i}")
        if d["name"] in names:
            raise ValidationError(f"{at}.name: duplicate diagnostic name {d['name']!r}")
        names.add(d["name"])
        validate_diagnostic(d, model, sim, selected, at)
        diagnostics.append(d)
    return Scenario(
        name=doc.get("name", Path(source).stem if source else "scenario"),
        model=model,
        simulation=sim,
        seed=int(doc.get("seed", 0)),
        meters=selected,
        distillers=distillers,
        diagnostics=diagnostics,
        output=doc.get("output"),
        digest=hashlib.sha256(data).hexdigest(),
        source=source,
    )


def _simulation(doc: dict, model: FeederModel) -> Simulation:
    where = "scenario.simulation"
    check(doc, SIMULATION_SCHEMA, where)
    sim = Simulation(float(doc["duration"]), int(doc.get("start_ns", 0)), int(doc.get("rate", REPORT_RATE)))
    prof = doc.get("profiles")
    sim.profiles = None if prof is None else dict(prof)
    noise = doc.get("noise", {})
    if noise == "noiseless":
        sim.angle_sigma = sim.magnitude_sigma_pu = 0.0
    else:
        sim.angle_sigma = math.radians(float(noise.get("angle_sigma_deg", math.degrees(DEFAULT_ANGLE_SIGMA))))
        sim.magnitude_sigma_pu = float(noise.get("magnitude_sigma_pu", DEFAULT_MAGNITUDE_SIGMA_PU))
        sim.pt_ratio_error = float(noise.get("pt_ratio_error", 0.0))
        sim.ct_ratio_error = float(noise.get("ct_ratio_error", 0.0))
    for i, ev in enumerate(doc.get("events", [])):
        event = Event(float(ev["time"]), ev["kind"], dict(ev.get("params", {})))
        try:
            validate_events(model, [event], sim.duration)
        except UpmuError as exc:
            raise ValidationError(f"{where}.events[{i}]: {exc}") from None
        sim.events.append(event)
    try:
        validate_events(model, sim.events, sim.duration)
    except UpmuError as exc:
        raise ValidationError(f"{where}.events: {exc}") from None
    return sim


def validate_diagnostic(d: dict, model: FeederModel, sim: Simulation | None, meters, at: str) -> None:
    """Cross-reference checks that need the model: meter, branch and bus ids and time windows."""
    meters = set(meters)
    branch_ids = {b.id for b in model.branches}
    switch_ids = {s.id for s in model.switches}

    def need_meter(key, value):
        if value not in meters:
            raise ValidationError(f"{at}.{key}: unknown or unrecorded meter {value!r}")

    for key in ("from_meter", "to_meter", "current_meter", "reference", "candidate", "meter"):
        if key in d:
            need_meter(key, d[key])
    for i, mid in enumerate(d.get("meters", [])):
        if mid not in meters:
            raise ValidationError(f"{at}.meters[{i}]: unknown or unrecorded meter {mid!r}")
    if "branch" in d and d["branch"] not in branch_ids:
        raise ValidationError(f"{at}.branch: unknown branch {d['branch']!r}")
    for sw in d.get("switches", {}):
        if sw not in switch_ids:
            raise ValidationError(f"{at}.switches.{sw}: unknown switch")
    for i, h in enumerate(d.get("hypotheses", [])):
        for j, sw in enumerate(h["closed"]):
            if sw not in switch_ids:
                raise ValidationError(f"{at}.hypotheses[{i}].closed[{j}]: unknown switch {sw!r}")
    for bus in d.get("pseudo_loads", {}):
        if bus not in model.buses:
            raise ValidationError(f"{at}.pseudo_loads.{bus}: unknown bus")
    for key in ("window", "train", "test", "prefault", "during"):
        if key in d:
            t0, t1 = d[key]
            if not t0 < t1:
                raise ValidationError(f"{at}.{key}: start must precede end")
            if sim is not None and t1 > sim.duration + 1e-9:
                raise ValidationError(f"{at}.{key}: ends after the {sim.duration} s simulation")
    if "at" in d and sim is not None and d["at"] >= sim.duration:
        raise ValidationError(f"{at}.at: outside the {sim.duration} s simulation")


def bundled_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("upmu.scenarios").iterdir() if p.name.endswith(".yaml"))


def bundled_path(name: str) -> Path:
    """Path of a bundled scenario; hyphens and underscores are interchangeable in the name."""
    return Path(str(resources.files("upmu.scenarios").joinpath(f"{name.replace('-', '_')}.yaml")))
