"""Node heaps: an in-memory list and a single-file append-only segment log.

File layout (all little-endian)::

    header   8 bytes magic b"UPMUSTR1", u32 format version (1)
    frame    u32 payload length | payload | u32 crc32(payload)

Payload kinds, by first byte:

    1 LEAF      u8 pw, u64 start, u32 n, u32 m,
                n x (i64 time, f64 value, i64 write_version),
                m x (i64 tombstone time, i64 version)
    2 INTERNAL  u8 pw, u64 start,
                64 x (u64 child, i64 count, f64 min, f64 max, f64 sum, i64 version)
    3 ROOT      u16 key length, key utf-8, u64 version, u64 root address

A node address is the byte offset of its frame. ROOT frames form the
version root table; they are appended after the nodes they reference, so a
torn write never exposes a partial tree. On open the log is scanned and a
truncated or corrupt trailing frame is dropped.
"""

from __future__ import annotations

import struct
import threading
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptStore
from .tree import FANOUT, Internal, Leaf

MAGIC = b"UPMUSTR1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sI")
FRAME = struct.Struct("<I")
LEAF_HEAD = struct.Struct("<BBQII")
INTERNAL_HEAD = struct.Struct("<BBQ")
ROOT_HEAD = struct.Struct("<BH")
ROOT_TAIL = struct.Struct("<QQ")
TAG_LEAF, TAG_INTERNAL, TAG_ROOT = 1, 2, 3

POINT = np.dtype([("t", "<i8"), ("v", "<f8"), ("w", "<i8")])
TOMB = np.dtype([("t", "<i8"), ("w", "<i8")])
SLOT = np.dtype([("child", "<u8"), ("count", "<i8"), ("min", "<f8"), ("max", "<f8"), ("sum", "<f8"), ("ver", "<i8")])


class MemoryHeap:
    def __init__(self):
        self._nodes: list = []
        self._lock = threading.Lock()

    def put(self, node) -> int:
        with self._lock:
            self._nodes.append(node)
            return len(self._nodes)

    def get(self, addr: int):
        return self._nodes[addr - 1]

    def commit(self, key: str, version: int, root: int) -> None:
        pass

    def __len__(self):
        return len(self._nodes)


def encode_node(node) -> bytes:
    if isinstance(node, Leaf):
        pts = np.empty(node.times.size, dtype=POINT)
        pts["t"], pts["v"], pts["w"] = node.times, node.values, node.wver
        dead = np.empty(node.dead_times.size, dtype=TOMB)
        dead["t"], dead["w"] = node.dead_times, node.dead_ver
        head = LEAF_HEAD.pack(TAG_LEAF, node.pw, node.start, pts.size, dead.size)
        return head + pts.tobytes() + dead.tobytes()
    slots = np.empty(FANOUT, dtype=SLOT)
    slots["child"], slots["count"] = node.child, node.count
    slots["min"], slots["max"], slots["sum"], slots["ver"] = node.vmin, node.vmax, node.vsum, node.ver
    return INTERNAL_HEAD.pack(TAG_INTERNAL, node.pw, node.start) + slots.tobytes()


def decode_node(payload: bytes):
    tag = payload[0]
    if tag == TAG_LEAF:
        _, pw, start, n, m = LEAF_HEAD.unpack_from(payload)
        off = LEAF_HEAD.size
        pts = np.frombuffer(payload, dtype=POINT, count=n, offset=off)
        dead = np.frombuffer(payload, dtype=TOMB, count=m, offset=off + n * POINT.itemsize)
        return Leaf(
            start, pw,
            pts["t"].astype(np.int64), pts["v"].astype(np.float64), pts["w"].astype(np.int64),
            dead["t"].astype(np.int64), dead["w"].astype(np.int64),
        )
    if tag == TAG_INTERNAL:
        _, pw, start = INTERNAL_HEAD.unpack_from(payload)
        s = np.frombuffer(payload, dtype=SLOT, count=FANOUT, offset=INTERNAL_HEAD.size)
        return Internal(
            start, pw,
            s["child"].astype(np.uint64), s["count"].astype(np.int64),
            s["min"].astype(np.float64), s["max"].astype(np.float64), s["sum"].astype(np.float64),
            s["ver"].astype(np.int64),
        )
    raise CorruptStore(f"unexpected record tag {tag}")


class FileHeap:
    """Append-only node log. Writes are buffered until ``commit``."""

    def __init__(self, path: str | Path, writable: bool = True):
        self.path = Path(path)
        self.writable = writable
        self._lock = threading.Lock()
        self._cache: dict[int, object] = {}
        self._pending: list[bytes] = []
        self._pending_nodes: dict[int, object] = {}
        self.roots: list[tuple[str, int, int]] = []
        if not self.path.exists():
            if not writable:
                raise CorruptStore(f"no store file at {self.path}")
            with open(self.path, "wb") as f:
                f.write(HEADER.pack(MAGIC, FORMAT_VERSION))
        self._end = self._scan(0)
        self._tail = self._end

    def _scan(self, start: int) -> int:
        """Read ROOT frames from ``start`` (0 = beginning); return the end of valid data."""
        with open(self.path, "rb") as f:
            data_len = f.seek(0, 2)
            f.seek(0)
            if start == 0:
                head = f.read(HEADER.size)
                if len(head) < HEADER.size:
                    raise CorruptStore("store file too short for header")
                magic, ver = HEADER.unpack(head)
                if magic != MAGIC:
                    raise CorruptStore(f"bad magic {magic!r}")
                if ver != FORMAT_VERSION:
                    raise CorruptStore(f"unsupported format version {ver}")
                pos = HEADER.size
            else:
                pos = start
            while pos + FRAME.size <= data_len:
                f.seek(pos)
                (n,) = FRAME.unpack(f.read(FRAME.size))
                if pos + FRAME.size + n + FRAME.size > data_len:
                    break
                payload = f.read(n)
                (crc,) = FRAME.unpack(f.read(FRAME.size))
                if zlib.crc32(payload) != crc:
                    break
                if payload[0] == TAG_ROOT:
                    _, klen = ROOT_HEAD.unpack_from(payload)
                    key = payload[ROOT_HEAD.size : ROOT_HEAD.size + klen].decode()
                    version, root = ROOT_TAIL.unpack_from(payload, ROOT_HEAD.size + klen)
                    self.roots.append((key, version, root))
                pos += FRAME.size + n + FRAME.size
        if self.writable and pos < data_len:
            # drop a torn tail left by an interrupted writer
            with open(self.path, "r+b") as f:
                f.truncate(pos)
        return pos

    def refresh(self) -> list[tuple[str, int, int]]:
        """Pick up ROOT frames appended by another process; return the new ones."""
        before = len(self.roots)
        with self._lock:
            self._end = self._scan(self._end)
            self._tail = max(self._tail, self._end)
        return self.roots[before:]

    def put(self, node) -> int:
        payload = encode_node(node)
        with self._lock:
            addr = self._tail
            self._pending.append(FRAME.pack(len(payload)) + payload + FRAME.pack(zlib.crc32(payload)))
            self._pending_nodes[addr] = node
            self._tail += 2 * FRAME.size + len(payload)
            return addr

    def commit(self, key: str, version: int, root: int) -> None:
        kb = key.encode()
        payload = ROOT_HEAD.pack(TAG_ROOT, len(kb)) + kb + ROOT_TAIL.pack(version, root)
        with self._lock:
            self._pending.append(FRAME.pack(len(payload)) + payload + FRAME.pack(zlib.crc32(payload)))
            blob = b"".join(self._pending)
            with open(self.path, "r+b") as f:
                f.seek(self._end)
                f.write(blob)
                f.flush()
            self._end += len(blob)
            self._tail = self._end
            self._cache.update(self._pending_nodes)
            self._pending.clear()
            self._pending_nodes.clear()
            self.roots.append((key, version, root))

    def get(self, addr: int):
        node = self._cache.get(addr)
        if node is not None:
            return node
        node = self._pending_nodes.get(addr)
        if node is not None:
            return node
        with open(self.path, "rb") as f:
            f.seek(addr)
            head = f.read(FRAME.size)
            if len(head) < FRAME.size:
                raise CorruptStore(f"dangling node address {addr}")
            (n,) = FRAME.unpack(head)
            payload = f.read(n)
            tail = f.read(FRAME.size)
        if len(payload) < n or len(tail) < FRAME.size or zlib.crc32(payload) != FRAME.unpack(tail)[0]:
            raise CorruptStore(f"checksum mismatch at {addr}")
        node = decode_node(payload)
        self._cache[addr] = node
        return node
