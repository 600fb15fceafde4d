"""Telemetry archives and the store's raw-channel layout.

An archive is a zip file holding ``meta.json`` plus one ``.npy`` array per
entry. Entries carry a fixed modification time so that identical telemetry
produces identical bytes.

In the store every meter owns twelve scalar channels: ``V_mag_a`` ..
``I_ang_c`` in volts, amperes and radians. Gap frames are not written.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..errors import CorruptStore, NotFound, ValidationError
from ..feeder.model import FeederModel
from ..feeder.telemetry import MeterStream, Telemetry
from ..phasor import PHASES
from ..store import Store, StreamKey

ARCHIVE_FORMAT = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _put(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, _EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def write_archive(path: str | Path, tel: Telemetry, meters: Iterable[str] | None = None, meta: dict | None = None) -> Path:
    ids = list(tel.meters) if meters is None else list(meters)
    doc = {
        "format": ARCHIVE_FORMAT,
        "frames": int(tel.timestamps.size),
        "meters": [
            {"id": m, "bus": tel.meters[m].bus, "v_base": tel.meters[m].v_base, "i_base": tel.meters[m].i_base}
            for m in ids
        ],
        **(meta or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _put(zf, "meta.json", json.dumps(doc, indent=1, sort_keys=True).encode())
        _put(zf, "timestamps.npy", _npy(tel.timestamps.astype(np.int64)))
        _put(zf, "gap.npy", _npy(tel.gap.astype(bool)))
        for m in ids:
            _put(zf, f"{m}.voltage.npy", _npy(tel.meters[m].voltage.astype(np.complex128)))
            _put(zf, f"{m}.current.npy", _npy(tel.meters[m].current.astype(np.complex128)))
    return path


def read_archive(path: str | Path) -> tuple[np.ndarray, dict[str, MeterStream], dict]:
    """Returns (timestamps, meter streams, metadata)."""
    path = Path(path)
    if not path.exists():
        raise NotFound(f"archive {path} does not exist")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != ARCHIVE_FORMAT:
                raise ValidationError(f"{path}: unsupported archive format {meta.get('format')!r}")

            def arr(name):
                return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

            ts = arr("timestamps.npy")
            streams = {}
            for m in meta["meters"]:
                streams[m["id"]] = MeterStream(m["id"], m["bus"], arr(f"{m['id']}.voltage.npy"),
                                               arr(f"{m['id']}.current.npy"), m["v_base"], m["i_base"])
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: not a telemetry archive ({exc})") from None
    return ts, streams, meta


def channel_keys(meter_id: str) -> list[StreamKey]:
    return [StreamKey(meter_id, f"{q}_{p}") for q in ("V_mag", "V_ang", "I_mag", "I_ang") for p in PHASES]


def ingest(store: Store, timestamps: np.ndarray, streams: Mapping[str, MeterStream]) -> dict[str, int]:
    """Write every meter's twelve channels; returns the new version per stream."""
    versions = {}
    for mid in sorted(streams):
        ms = streams[mid]
        ok = np.all(np.isfinite(ms.voltage), axis=1) & np.all(np.isfinite(ms.current), axis=1)
        t = np.asarray(timestamps, dtype=np.int64)[ok]
        cols = {"V": ms.voltage[ok], "I": ms.current[ok]}
        for key in channel_keys(mid):
            q, part, p = key.channel.split("_")
            x = cols[q][:, PHASES.index(p)]
            values = np.abs(x) if part == "mag" else np.angle(x)
            versions[str(key)] = store.insert(key, t, values)
    return versions


def load_streams(store: Store, model: FeederModel, meter_ids: Iterable[str], t0: int, t1: int,
                 version: Mapping[str, int] | None = None) -> tuple[np.ndarray, dict[str, MeterStream]]:
    """Rebuild phasor series for meters over [t0, t1) on the union time grid.

    Frames missing from a meter are NaN rows, which the analytics treat as gaps.
    """
    raw = {}
    for mid in meter_ids:
        model.meter(mid)
        for key in channel_keys(mid):
            if not store.has_stream(key):
                raise NotFound(f"stream {key} is not in the store; ingest telemetry first")
            raw[str(key)] = store.query_raw(key, t0, t1, None if version is None else version.get(str(key)))
    if not raw:
        raise ValidationError("no meters selected")
    grid = np.unique(np.concatenate([t for t, _ in raw.values()]))
    out = {}
    for mid in meter_ids:
        m = model.meter(mid)
        series = {}
        for q in ("V", "I"):
            arr = np.full((grid.size, 3), np.nan + 0j)
            for k, p in enumerate(PHASES):
                tm, vm = raw[f"{mid}/{q}_mag_{p}"]
                ta, va = raw[f"{mid}/{q}_ang_{p}"]
                if tm.size != ta.size or np.any(tm != ta):
                    raise CorruptStore(f"{mid}: magnitude and angle channels of {q}_{p} disagree")
                arr[np.searchsorted(grid, tm), k] = vm * np.exp(1j * va)
            series[q] = arr
        out[mid] = MeterStream(mid, m.bus, series["V"], series["I"], model.bus_base(m.bus), model.current_base(m.bus))
    return grid, out
