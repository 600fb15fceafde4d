"""Chunk-driven derived streams with lineage.

Each distiller reads one or more input streams, joins them on the first
input's timestamps (nearest neighbour within a tolerance), runs a kernel and
writes an output stream. ``propagate`` asks the store which input windows
changed since the versions last consumed, widens them by the kernel lag and
the join tolerance, and recomputes only the output chunks those windows can
influence. Contiguous dirty chunks are recomputed in one kernel call; if that
call raises, the run is retried chunk by chunk and failing chunks are
recorded in the log and left as they were.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CyclicDependency, NotFound, OutputClaimed, ValidationError
from ..store import Store, StreamKey
from .kernels import KERNELS

DEFAULT_CHUNK_PW = 22
REPORT_INTERVAL_NS = 1e9 / 120
DEFAULT_TOLERANCE_NS = int(REPORT_INTERVAL_NS / 2)
REGISTRY_FILE = "distillers.json"


@dataclass(frozen=True)
class DistillerSpec:
    name: str
    inputs: tuple[str, ...]
    output: str
    kernel: str
    kernel_version: int = 1
    params: dict = field(default_factory=dict)
    lag_ns: int | None = None  # None: take the kernel's declared lag
    tolerance_ns: int = DEFAULT_TOLERANCE_NS
    chunk_pointwidth: int = DEFAULT_CHUNK_PW

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(str(StreamKey.parse(k)) for k in self.inputs))
        object.__setattr__(self, "output", str(StreamKey.parse(self.output)))
        object.__setattr__(self, "params", dict(self.params))
        if not self.name:
            raise ValidationError("distiller name must not be empty")
        info = KERNELS.get(self.kernel)
        if info is None:
            raise NotFound(f"unknown kernel {self.kernel!r}; available: {sorted(KERNELS)}")
        if not self.inputs:
            raise ValidationError(f"distiller {self.name} has no inputs")
        if info.n_inputs is not None and len(self.inputs) != info.n_inputs:
            raise ValidationError(f"kernel {self.kernel} takes {info.n_inputs} inputs, got {len(self.inputs)}")
        if len(set(self.inputs)) != len(self.inputs):
            raise ValidationError(f"distiller {self.name} lists an input twice")
        if self.kernel_version < 0 or self.tolerance_ns < 0:
            raise ValidationError("kernel_version and tolerance_ns must be non-negative")
        if not 0 <= self.chunk_pointwidth <= 62:
            raise ValidationError("chunk_pointwidth outside [0, 62]")

    @property
    def lag(self) -> int:
        if self.lag_ns is not None:
            return int(self.lag_ns)
        return KERNELS[self.kernel].lag(self.params)

    def run_kernel(self, times, values):
        return KERNELS[self.kernel].fn(times, values, **self.params)


@dataclass(frozen=True)
class Materialization:
    distiller: str
    kernel_version: int
    input_versions: dict  # input key -> [from_version, to_version]
    output_version: int | None  # None when nothing was written
    ranges: list  # recomputed [t0, t1) output ranges
    failed: list  # chunk ranges whose kernel call raised
    unmatched: int  # primary samples without a partner within tolerance
    full: bool = False


@dataclass
class _State:
    consumed: dict  # input key -> version
    kernel_version: int | None  # version last materialized


def join_nearest(primary_t: np.ndarray, others: list[tuple[np.ndarray, np.ndarray]], tol: int):
    """Keep primary samples with a partner within ``tol`` in every other stream.

    Returns (mask over primary samples, partner values per other stream).
    Ties go to the earlier partner.
    """
    keep = np.ones(primary_t.size, dtype=bool)
    picked = []
    for t, v in others:
        if t.size == 0:
            keep[:] = False
            picked.append(np.zeros(primary_t.size))
            continue
        j = np.searchsorted(t, primary_t)
        left = np.clip(j - 1, 0, t.size - 1)
        right = np.clip(j, 0, t.size - 1)
        dl = np.abs(primary_t - t[left])
        dr = np.abs(t[right] - primary_t)
        best = np.where(dr < dl, right, left)
        keep &= np.minimum(dl, dr) <= tol
        picked.append(v[best])
    return keep, picked


class Pipeline:
    """Registry of distillers over one store, with an append-only log."""

    def __init__(self, store: Store, registry_path: str | Path | None = None):
        self.store = store
        if registry_path is None and store.path is not None:
            registry_path = store.path / REGISTRY_FILE
        self.registry_path = None if registry_path is None else Path(registry_path)
        self.specs: dict[str, DistillerSpec] = {}
        self.state: dict[str, _State] = {}
        self.log: list[Materialization] = []
        self._log_lock = threading.Lock()
        if self.registry_path is not None and self.registry_path.exists():
            self._load()

    # -- registry -------------------------------------------------------

    def register(self, spec: DistillerSpec) -> str:
        if spec.name in self.specs:
            raise ValidationError(f"distiller {spec.name} already registered")
        for other in self.specs.values():
            if other.output == spec.output:
                raise OutputClaimed(f"{spec.output} is already written by {other.name}")
        if spec.output in spec.inputs:
            raise CyclicDependency(f"{spec.name} reads its own output")
        trial = dict(self.specs)
        trial[spec.name] = spec
        self._topological(trial)
        self.specs[spec.name] = spec
        self.state[spec.name] = _State({k: 0 for k in spec.inputs}, None)
        self.store.create_stream(spec.output)
        self._save()
        return spec.name

    def bump_kernel_version(self, name: str) -> DistillerSpec:
        spec = self._spec(name)
        new = DistillerSpec(**{**asdict(spec), "kernel_version": spec.kernel_version + 1})
        self.specs[name] = new
        self._save()
        return new

    def _spec(self, name: str) -> DistillerSpec:
        try:
            return self.specs[name]
        except KeyError:
            raise NotFound(f"no distiller named {name}") from None

    @staticmethod
    def _topological(specs: dict[str, DistillerSpec]) -> list[str]:
        producer = {s.output: n for n, s in specs.items()}
        deps = {n: sorted({producer[i] for i in s.inputs if i in producer}) for n, s in specs.items()}
        order, mark = [], {}

        def visit(n, path):
            if mark.get(n) == 2:
                return
            if mark.get(n) == 1:
                raise CyclicDependency(" -> ".join(path + [n]))
            mark[n] = 1
            for d in deps[n]:
                visit(d, path + [n])
            mark[n] = 2
            order.append(n)

        for n in sorted(specs):
            visit(n, [])
        return order

    def order(self) -> list[str]:
        return self._topological(self.specs)

    # -- execution ------------------------------------------------------

    def propagate(self) -> list[Materialization]:
        out = []
        for name in self.order():
            m = self._materialize(name)
            if m is not None:
                out.append(m)
        if out:
            self._save()
        return out

    def _materialize(self, name: str) -> Materialization | None:
        spec = self.specs[name]
        st = self.state[name]
        store = self.store
        pw = spec.chunk_pointwidth
        latest = {k: store.latest_version(k) if store.has_stream(k) else 0 for k in spec.inputs}
        full = st.kernel_version != spec.kernel_version
        if not full and all(latest[k] == st.consumed[k] for k in spec.inputs):
            return None
        since = {k: 0 if full else st.consumed[k] for k in spec.inputs}
        lag, tol = spec.lag, spec.tolerance_ns
        dirty: set[int] = set()
        for k in spec.inputs:
            if latest[k] == since[k]:
                continue
            for a, b in store.changed_ranges(k, since[k], latest[k], pw):
                lo = (a - tol) >> pw
                hi = (b - 1 + lag + tol) >> pw
                dirty.update(range(lo, hi + 1))
        runs = _runs(sorted(dirty))
        ranges, failed, times, vals, unmatched = [], [], [], [], 0
        for c0, c1 in runs:
            t0, t1 = c0 << pw, c1 << pw
            try:
                ot, ov, miss = self._compute(spec, latest, t0, t1)
                ranges.append((t0, t1))
                times.append(ot)
                vals.append(ov)
                unmatched += miss
            except Exception:
                for c in range(c0, c1):
                    a, b = c << pw, (c + 1) << pw
                    try:
                        ot, ov, miss = self._compute(spec, latest, a, b)
                    except Exception as exc:  # quarantine this chunk
                        failed.append((a, b, f"{type(exc).__name__}: {exc}"))
                        continue
                    ranges.append((a, b))
                    times.append(ot)
                    vals.append(ov)
                    unmatched += miss
        ranges = _merge(sorted(ranges))
        version = None
        if ranges:
            t = np.concatenate(times) if times else np.empty(0, dtype=np.int64)
            v = np.concatenate(vals) if vals else np.empty(0)
            version = store.replace_ranges(spec.output, ranges, t, v)
        st.consumed = dict(latest)
        st.kernel_version = spec.kernel_version
        if not ranges and not failed:
            return None
        m = Materialization(
            name,
            spec.kernel_version,
            {k: [since[k], latest[k]] for k in spec.inputs},
            version,
            [list(r) for r in ranges],
            [list(f) for f in failed],
            int(unmatched),
            full,
        )
        with self._log_lock:
            self.log.append(m)
        return m

    def _compute(self, spec: DistillerSpec, versions: dict, t0: int, t1: int, store: Store | None = None):
        """Output points in [t0, t1) computed from inputs at the given versions."""
        store = store or self.store
        lag, tol = spec.lag, spec.tolerance_ns
        lo, hi = t0 - lag - tol, t1 + tol
        data = []
        for k in spec.inputs:
            if store.has_stream(k):
                data.append(store.query_raw(k, lo, hi, version=versions[k]))
            else:
                data.append((np.empty(0, dtype=np.int64), np.empty(0)))
        pt, pv = data[0]
        sel = (pt >= t0 - lag) & (pt < t1)
        pt, pv = pt[sel], pv[sel]
        keep, partners = join_nearest(pt, data[1:], tol)
        miss = int((~keep & (pt >= t0)).sum())
        jt = pt[keep]
        jv = [pv[keep]] + [p[keep] for p in partners]
        ot, ov = spec.run_kernel(jt, jv)
        ot = np.asarray(ot, dtype=np.int64)
        ov = np.asarray(ov, dtype=np.float64)
        inside = (ot >= t0) & (ot < t1) & np.isfinite(ov)
        return ot[inside], ov[inside], miss

    def recompute_full(self, name: str, store: Store | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Output from the latest inputs in one pass (reference for incremental runs)."""
        spec = self._spec(name)
        store = store or self.store
        versions = {k: store.latest_version(k) if store.has_stream(k) else 0 for k in spec.inputs}
        lo, hi = None, None
        for k in spec.inputs:
            if store.has_stream(k):
                t, _ = store.query_raw(k, version=versions[k])
                if t.size:
                    lo = t[0] if lo is None else min(lo, t[0])
                    hi = t[-1] if hi is None else max(hi, t[-1])
        if lo is None:
            return np.empty(0, dtype=np.int64), np.empty(0)
        t, v, _ = self._compute(spec, versions, int(lo) - spec.tolerance_ns, int(hi) + spec.lag + spec.tolerance_ns + 1, store)
        return t, v

    # -- lineage --------------------------------------------------------

    def history(self, name: str) -> list[Materialization]:
        return [m for m in self.log if m.distiller == name]

    def lineage(self, output, t: int) -> Materialization | None:
        """The materialization that last wrote the output at time ``t``."""
        key = str(StreamKey.parse(output))
        names = [n for n, s in self.specs.items() if s.output == key]
        if not names:
            raise NotFound(f"no distiller writes {key}")
        for m in reversed(self.history(names[0])):
            if any(a <= t < b for a, b in m.ranges):
                return m
        return None

    def replay(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Rebuild the output from the log alone, reading inputs at the logged versions."""
        spec = self._spec(name)
        scratch = Store()
        key = spec.output
        scratch.create_stream(key)
        for m in self.history(name):
            if not m.ranges:
                continue
            versions = {k: v[1] for k, v in m.input_versions.items()}
            ts, vs = [], []
            for a, b in m.ranges:
                t, v, _ = self._compute(spec, versions, a, b)
                ts.append(t)
                vs.append(v)
            scratch.replace_ranges(key, [tuple(r) for r in m.ranges], np.concatenate(ts), np.concatenate(vs))
        return scratch.query_raw(key)

    # -- persistence ----------------------------------------------------

    def _save(self) -> None:
        if self.registry_path is None:
            return
        doc = {
            "format": 1,
            "distillers": [asdict(s) for s in self.specs.values()],
            "state": {n: {"consumed": s.consumed, "kernel_version": s.kernel_version} for n, s in self.state.items()},
            "log": [asdict(m) for m in self.log],
        }
        tmp = self.registry_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
        tmp.replace(self.registry_path)

    def _load(self) -> None:
        doc = json.loads(self.registry_path.read_text())
        for d in doc["distillers"]:
            d["inputs"] = tuple(d["inputs"])
            spec = DistillerSpec(**d)
            self.specs[spec.name] = spec
            self.store.create_stream(spec.output)
        for n, s in doc["state"].items():
            self.state[n] = _State(dict(s["consumed"]), s["kernel_version"])
        self.log = [Materialization(**m) for m in doc["log"]]


def _runs(chunks: list[int]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for c in chunks:
        if out and out[-1][1] == c:
            out[-1] = (out[-1][0], c + 1)
        else:
            out.append((c, c + 1))
    return out


def _merge(ranges):
    out = []
    for a, b in ranges:
        if out and out[-1][1] == a:
            out[-1] = (out[-1][0], b)
        else:
            out.append((a, b))
    return out
