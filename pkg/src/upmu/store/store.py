"""Versioned multi-resolution store of scalar channels."""

from __future__ import annotations

import fcntl
import math
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import BatchConflict, InvalidPointwidth, NotFound, ValidationError, WriterBusy
from .heap import FileHeap, MemoryHeap
from .tree import NULL, Tree

ENV_VAR = "UPMU_STORE"
DATA_FILE = "store.dat"
LOCK_FILE = "writer.lock"
MAX_WINDOWS = 1 << 22
T_MIN = -(1 << 63)
T_MAX = (1 << 63) - 1

RAW_CHANNELS = tuple(f"{q}_{p}" for q in ("V_mag", "V_ang", "I_mag", "I_ang") for p in "abc")


@dataclass(frozen=True, order=True)
class StreamKey:
    """``meter_id`` plus a raw channel (e.g. ``V_ang_a``) or a derived-stream name."""

    meter_id: str
    channel: str

    def __post_init__(self):
        if not self.meter_id or "/" in self.meter_id:
            raise ValidationError(f"bad meter id {self.meter_id!r}")
        if not self.channel:
            raise ValidationError("empty channel name")

    @classmethod
    def parse(cls, key: "StreamKey | str") -> "StreamKey":
        if isinstance(key, StreamKey):
            return key
        meter, sep, channel = str(key).partition("/")
        if not sep:
            raise ValidationError(f"stream key {key!r} is not of the form meter/channel")
        return cls(meter, channel)

    @property
    def is_raw(self) -> bool:
        return self.channel in RAW_CHANNELS

    def __str__(self):
        return f"{self.meter_id}/{self.channel}"


@dataclass(frozen=True)
class StatPoint:
    window_start: int
    pointwidth: int
    count: int
    min: float | None
    max: float | None
    mean: float | None


class Store:
    """Copy-on-write tree per stream over a shared node heap.

    ``Store()`` is purely in memory. ``Store(path)`` keeps everything in
    ``path/store.dat``; opening for writing takes an exclusive lock on
    ``path/writer.lock`` so only one process writes at a time. Within a
    process each stream admits one writer at a time; readers address an
    explicit version and never block.
    """

    def __init__(self, path: str | os.PathLike | None = None, *, readonly: bool = False, leaf_capacity: int = 1024):
        self.path = None if path is None else Path(path)
        self.readonly = readonly
        self._lockfile = None
        if self.path is None:
            heap = MemoryHeap()
        else:
            self.path.mkdir(parents=True, exist_ok=True)
            if not readonly:
                self._lockfile = open(self.path / LOCK_FILE, "a+")
                try:
                    fcntl.flock(self._lockfile, fcntl.LOCK_EX | fcntl.LOCK_NB)
                except BlockingIOError:
                    self._lockfile.close()
                    raise WriterBusy(f"another process is writing to {self.path}") from None
            elif not (self.path / DATA_FILE).exists():
                raise NotFound(f"no store at {self.path}")
            heap = FileHeap(self.path / DATA_FILE, writable=not readonly)
        self.heap = heap
        self.tree = Tree(heap, leaf_capacity)
        self._roots: dict[str, list[int]] = {}
        self._writers: dict[str, threading.Lock] = {}
        self._meta = threading.Lock()
        if isinstance(heap, FileHeap):
            self._load_roots(heap.roots)

    @classmethod
    def from_env(cls, path=None, **kw) -> "Store":
        path = path or os.environ.get(ENV_VAR)
        if not path:
            raise ValidationError(f"no store path given and ${ENV_VAR} is unset")
        return cls(path, **kw)

    def _load_roots(self, records):
        for key, version, root in records:
            roots = self._roots.setdefault(key, [NULL])
            if version != len(roots):
                continue  # duplicate or out-of-sequence record from a torn history
            roots.append(root)

    def refresh(self) -> None:
        """Readers on a file store: pick up versions committed since opening."""
        if isinstance(self.heap, FileHeap):
            self._load_roots(self.heap.refresh())

    def close(self) -> None:
        if self._lockfile is not None:
            fcntl.flock(self._lockfile, fcntl.LOCK_UN)
            self._lockfile.close()
            self._lockfile = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- metadata -------------------------------------------------------

    def streams(self) -> list[StreamKey]:
        return sorted(StreamKey.parse(k) for k in self._roots)

    def has_stream(self, key) -> bool:
        return str(StreamKey.parse(key)) in self._roots

    def latest_version(self, key) -> int:
        return len(self._root_list(key)) - 1

    def _root_list(self, key) -> list[int]:
        k = str(StreamKey.parse(key))
        try:
            return self._roots[k]
        except KeyError:
            raise NotFound(f"unknown stream {k}") from None

    def _root(self, key, version: int | None) -> int:
        roots = self._root_list(key)
        if version is None:
            return roots[-1]
        if not 0 <= version < len(roots):
            raise NotFound(f"stream {StreamKey.parse(key)} has no version {version}")
        return roots[version]

    # -- writes ---------------------------------------------------------

    @contextmanager
    def writer(self, key, timeout: float = 0.0):
        """Hold the single-writer lock of a stream; raises WriterBusy on contention."""
        if self.readonly:
            raise ValidationError("store opened read-only")
        k = str(StreamKey.parse(key))
        with self._meta:
            lock = self._writers.setdefault(k, threading.Lock())
        acquired = lock.acquire(timeout=timeout) if timeout > 0 else lock.acquire(blocking=False)
        if not acquired:
            raise WriterBusy(f"stream {k} already has a writer")
        try:
            yield _Writer(self, k)
        finally:
            lock.release()

    def create_stream(self, key) -> None:
        k = str(StreamKey.parse(key))
        with self._meta:
            self._roots.setdefault(k, [NULL])

    def insert(self, key, times, values) -> int:
        """Insert points (any order, unique timestamps); returns the new version."""
        with self.writer(key, timeout=30.0) as w:
            return w.insert(times, values)

    def replace_range(self, key, t0: int, t1: int, times, values) -> int:
        """Atomically erase [t0, t1) and insert points that all lie inside it."""
        return self.replace_ranges(key, [(t0, t1)], times, values)

    def replace_ranges(self, key, ranges, times, values) -> int:
        """Erase several disjoint [t0, t1) ranges and insert points inside them, as one version."""
        with self.writer(key, timeout=30.0) as w:
            return w.replace_ranges(ranges, times, values)

    def _commit(self, k: str, times, values, erase=None) -> int:
        t = np.asarray(times, dtype=np.int64).reshape(-1)
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if t.shape != v.shape:
            raise ValidationError("times and values differ in length")
        if not np.all(np.isfinite(v)):
            raise ValidationError("values must be finite")
        order = np.argsort(t, kind="stable")
        t, v = t[order], v[order]
        if t.size > 1 and np.any(t[1:] == t[:-1]):
            dup = int(t[1:][t[1:] == t[:-1]][0])
            raise BatchConflict(f"duplicate timestamp {dup} in one batch")
        with self._meta:
            roots = self._roots.setdefault(k, [NULL])
        version = len(roots)
        if erase is None:
            root = self.tree.write(roots[-1], t, v, version)
        else:
            spans = sorted((int(a), int(b)) for a, b in erase)
            if any(a > b for a, b in spans) or any(spans[i][1] > spans[i + 1][0] for i in range(len(spans) - 1)):
                raise ValidationError("erase ranges must be ordered and disjoint")
            bounds = np.searchsorted(t, [x for span in spans for x in span]).reshape(-1, 2)
            if int((bounds[:, 1] - bounds[:, 0]).sum()) != t.size:
                raise ValidationError("replacement points must lie inside the erased ranges")
            root = roots[-1]
            for (a, b), (i, j) in zip(spans, bounds):
                root = self.tree.write(root, t[i:j], v[i:j], version, (a, b))
        self.heap.commit(k, version, root)
        roots.append(root)
        return version

    # -- reads ----------------------------------------------------------

    def query_raw(self, key, t0: int = T_MIN, t1: int = T_MAX, version: int | None = None):
        """Points with t0 <= t < t1 as (times, values) arrays, ascending."""
        if t0 > t1:
            raise ValidationError("t0 must not exceed t1")
        return self.tree.raw(self._root(key, version), int(t0), int(t1))

    def query_windows(self, key, t0: int, t1: int, pointwidth: int, version: int | None = None) -> list[StatPoint]:
        """Exact per-window statistics on the 2**pointwidth grid.

        t0 is aligned down and t1 up to the grid; windows without points are
        returned with count 0.
        """
        pw = _check_pw(pointwidth)
        if t0 > t1:
            raise ValidationError("t0 must not exceed t1")
        root = self._root(key, version)
        w0 = (int(t0) >> pw) << pw
        w1 = -((-int(t1)) >> pw) << pw
        n = (w1 - w0) >> pw
        if n > MAX_WINDOWS:
            raise ValidationError(f"{n} windows requested; limit is {MAX_WINDOWS}")
        count, vmin, vmax, vsum = self.tree.windows(root, w0 + (1 << 63), n, pw)
        out = []
        for k in range(n):
            c = int(count[k])
            if c:
                mean = min(max(vsum[k] / c, vmin[k]), vmax[k])
                out.append(StatPoint(w0 + (k << pw), pw, c, float(vmin[k]), float(vmax[k]), float(mean)))
            else:
                out.append(StatPoint(w0 + (k << pw), pw, 0, None, None, None))
        return out

    def changed_ranges(self, key, version_a: int, version_b: int, pointwidth: int) -> list[tuple[int, int]]:
        """Sorted disjoint [start, end) intervals, aligned to 2**pointwidth,
        covering every timestamp written or erased after version_a up to version_b."""
        pw = _check_pw(pointwidth)
        if version_a > version_b:
            raise ValidationError("version_a must not exceed version_b")
        self._root(key, version_a)
        root = self._root(key, version_b)
        if version_a == version_b:
            return []
        starts = sorted(u - (1 << 63) for u in self.tree.changed_windows(root, version_a, pw))
        out: list[tuple[int, int]] = []
        for s in starts:
            if out and out[-1][1] == s:
                out[-1] = (out[-1][0], s + (1 << pw))
            else:
                out.append((s, s + (1 << pw)))
        return out

    def summary(self, key, version: int | None = None) -> StatPoint:
        s = self.tree.summary(self._root(key, version))
        if s.count == 0:
            return StatPoint(T_MIN, 64, 0, None, None, None)
        return StatPoint(T_MIN, 64, s.count, s.vmin, s.vmax, min(max(s.vsum / s.count, s.vmin), s.vmax))


class _Writer:
    def __init__(self, store: Store, key: str):
        self._store = store
        self.key = key

    def insert(self, times, values) -> int:
        return self._store._commit(self.key, times, values)

    def replace_range(self, t0: int, t1: int, times, values) -> int:
        return self.replace_ranges([(t0, t1)], times, values)

    def replace_ranges(self, ranges, times, values) -> int:
        return self._store._commit(self.key, times, values, erase=list(ranges))


def _check_pw(pointwidth) -> int:
    if isinstance(pointwidth, bool) or not isinstance(pointwidth, (int, np.integer)):
        raise InvalidPointwidth(f"pointwidth must be an integer, got {pointwidth!r}")
    if not 0 <= pointwidth <= 62:
        raise InvalidPointwidth(f"pointwidth {pointwidth} outside [0, 62]")
    return int(pointwidth)


def merge_stats(points: Iterable[StatPoint]) -> StatPoint | None:
    """Count-weighted merge of window statistics."""
    pts = [p for p in points if p.count]
    if not pts:
        return None
    n = sum(p.count for p in pts)
    mean = math.fsum(p.mean * p.count for p in pts) / n
    return StatPoint(pts[0].window_start, pts[0].pointwidth, n, min(p.min for p in pts), max(p.max for p in pts), mean)
