"""Copy-on-write 64-ary time-partitioned tree.

Timestamps are signed 64-bit nanoseconds; internally every node is addressed
in unsigned offset space ``u = t + 2**63`` by ``(start, pw)`` and covers
``[start, start + 2**pw)``. The root covers the whole space (pw = 64) and
children of a node at pw cover pw - 6. Leaves hold sorted points with the
version that wrote each one, plus tombstones for points removed by range
replacement. Internal nodes carry per-child count/min/max/sum and the highest
write version below each child so aggregate and diff queries can stop early.

Nodes are immutable; an insert writes new nodes along the touched paths and
returns a new root address. Address 0 is the empty tree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FANOUT_BITS = 6
FANOUT = 1 << FANOUT_BITS
ROOT_PW = 64
SIGN = np.uint64(1 << 63)
NULL = 0


def to_offset(t: np.ndarray) -> np.ndarray:
    return np.asarray(t, dtype=np.int64).view(np.uint64) ^ SIGN


def offset_of(t: int) -> int:
    return int(t) + (1 << 63)


@dataclass(frozen=True, eq=False)
class Leaf:
    start: int
    pw: int
    times: np.ndarray  # int64, sorted
    values: np.ndarray  # float64
    wver: np.ndarray  # int64, version that wrote each point
    dead_times: np.ndarray  # int64 tombstones
    dead_ver: np.ndarray  # int64

    def summary(self) -> "Summary":
        ver = max(
            int(self.wver.max()) if self.wver.size else -1,
            int(self.dead_ver.max()) if self.dead_ver.size else -1,
        )
        if self.times.size == 0:
            return Summary(0, np.inf, -np.inf, 0.0, ver)
        v = self.values
        return Summary(int(v.size), float(v.min()), float(v.max()), float(v.sum()), ver)


@dataclass(frozen=True, eq=False)
class Internal:
    start: int
    pw: int
    child: np.ndarray  # uint64[64] addresses, 0 = empty
    count: np.ndarray  # int64[64]
    vmin: np.ndarray
    vmax: np.ndarray
    vsum: np.ndarray
    ver: np.ndarray  # int64[64] max write version in subtree, -1 when empty

    @property
    def child_pw(self) -> int:
        return self.pw - FANOUT_BITS

    def child_start(self, i: int) -> int:
        return self.start + (i << self.child_pw)

    def summary(self) -> "Summary":
        live = self.count > 0
        return Summary(
            int(self.count.sum()),
            float(self.vmin[live].min()) if live.any() else np.inf,
            float(self.vmax[live].max()) if live.any() else -np.inf,
            float(self.vsum.sum()),
            int(self.ver.max()),
        )


@dataclass(frozen=True)
class Summary:
    count: int
    vmin: float
    vmax: float
    vsum: float
    ver: int


_EMPTY_I = np.empty(0, dtype=np.int64)
_EMPTY_F = np.empty(0, dtype=np.float64)


class Tree:
    """Algorithms over nodes held in a heap (``get(addr)`` / ``put(node)``)."""

    def __init__(self, heap, leaf_capacity: int = 1024):
        if leaf_capacity < 1:
            raise ValueError("leaf_capacity must be positive")
        self.heap = heap
        self.cap = leaf_capacity

    # -- writes ---------------------------------------------------------

    def write(self, root: int, times, values, version: int, erase: tuple[int, int] | None = None) -> int:
        """Insert sorted unique points (and optionally erase a [t0, t1) range first)."""
        t = np.asarray(times, dtype=np.int64)
        v = np.asarray(values, dtype=np.float64)
        w = np.full(t.size, version, dtype=np.int64)
        span = None if erase is None else (offset_of(erase[0]), offset_of(erase[1]))
        addr, _ = self._write(root, 0, ROOT_PW, t, v, w, span, version)
        return addr

    def _write(self, addr, start, pw, t, v, w, span, version):
        if addr == NULL:
            return self._build(start, pw, t, v, w, _EMPTY_I, _EMPTY_I)
        node = self.heap.get(addr)
        if isinstance(node, Leaf):
            ot, ov, ow = node.times, node.values, node.wver
            dt, dw = node.dead_times, node.dead_ver
            if span is not None:
                u = to_offset(ot)
                gone = (u >= np.uint64(span[0])) & (u < np.uint64(span[1]))
                if gone.any():
                    dt = np.concatenate([dt, ot[gone]])
                    dw = np.concatenate([dw, np.full(int(gone.sum()), version, dtype=np.int64)])
                    ot, ov, ow = ot[~gone], ov[~gone], ow[~gone]
                elif t.size == 0:
                    return addr, node.summary()
            if t.size:
                keep = ~np.isin(ot, t)
                ot = np.concatenate([ot[keep], t])
                ov = np.concatenate([ov[keep], v])
                ow = np.concatenate([ow[keep], w])
                order = np.argsort(ot, kind="stable")
                ot, ov, ow = ot[order], ov[order], ow[order]
            return self._build(start, pw, ot, ov, ow, dt, dw)

        cpw = node.child_pw
        idx = self._child_index(t, start, cpw)
        child = node.child.copy()
        stats = [node.count.copy(), node.vmin.copy(), node.vmax.copy(), node.vsum.copy(), node.ver.copy()]
        touched = set(np.unique(idx).tolist())
        if span is not None:
            lo = max(span[0], start)
            hi = min(span[1], start + (1 << pw))
            if lo < hi:
                first = (lo - start) >> cpw
                last = (hi - 1 - start) >> cpw
                touched.update(i for i in range(first, last + 1) if child[i] != NULL)
        bounds = np.searchsorted(idx, np.arange(FANOUT + 1))
        changed = False
        for i in sorted(touched):
            a, b = bounds[i], bounds[i + 1]
            new_addr, s = self._write(
                int(child[i]), node.child_start(i), cpw, t[a:b], v[a:b], w[a:b], span, version
            )
            if new_addr != child[i]:
                changed = True
            child[i] = new_addr
            self._set_stats(stats, i, s)
        if not changed:
            return addr, node.summary()
        new = Internal(start, pw, child, *stats)
        return self.heap.put(new), new.summary()

    def _build(self, start, pw, t, v, w, dt, dw):
        if t.size <= self.cap or pw < FANOUT_BITS:
            leaf = Leaf(start, pw, t, v, w, dt, dw)
            return self.heap.put(leaf), leaf.summary()
        cpw = pw - FANOUT_BITS
        idx = self._child_index(t, start, cpw)
        didx = self._child_index(dt, start, cpw)
        bounds = np.searchsorted(idx, np.arange(FANOUT + 1))
        child = np.zeros(FANOUT, dtype=np.uint64)
        stats = [
            np.zeros(FANOUT, dtype=np.int64),
            np.full(FANOUT, np.inf),
            np.full(FANOUT, -np.inf),
            np.zeros(FANOUT),
            np.full(FANOUT, -1, dtype=np.int64),
        ]
        for i in range(FANOUT):
            a, b = bounds[i], bounds[i + 1]
            dead = didx == i
            if a == b and not dead.any():
                continue
            ca, s = self._build(start + (i << cpw), cpw, t[a:b], v[a:b], w[a:b], dt[dead], dw[dead])
            child[i] = ca
            self._set_stats(stats, i, s)
        node = Internal(start, pw, child, *stats)
        return self.heap.put(node), node.summary()

    @staticmethod
    def _child_index(t, start, cpw):
        if t.size == 0:
            return _EMPTY_I
        return ((to_offset(t) - np.uint64(start)) >> np.uint64(cpw)).astype(np.int64)

    @staticmethod
    def _set_stats(stats, i, s: Summary):
        stats[0][i], stats[1][i], stats[2][i], stats[3][i], stats[4][i] = s.count, s.vmin, s.vmax, s.vsum, s.ver

    # -- reads ----------------------------------------------------------

    def raw(self, root: int, t0: int, t1: int) -> tuple[np.ndarray, np.ndarray]:
        ts, vs = [], []
        if root != NULL and t0 < t1:
            self._raw(root, offset_of(t0), offset_of(t1), t0, t1, ts, vs)
        if not ts:
            return _EMPTY_I.copy(), _EMPTY_F.copy()
        return np.concatenate(ts), np.concatenate(vs)

    def _raw(self, addr, u0, u1, t0, t1, ts, vs):
        node = self.heap.get(addr)
        if isinstance(node, Leaf):
            a, b = np.searchsorted(node.times, [t0, t1])
            if b > a:
                ts.append(node.times[a:b])
                vs.append(node.values[a:b])
            return
        cpw = node.child_pw
        for i in self._overlapping(node, u0, u1):
            if node.count[i] > 0:
                self._raw(int(node.child[i]), u0, u1, t0, t1, ts, vs)

    @staticmethod
    def _overlapping(node: Internal, u0: int, u1: int) -> range:
        cpw = node.child_pw
        lo = max(u0, node.start)
        hi = min(u1, node.start + (1 << node.pw))
        if lo >= hi:
            return range(0)
        return range((lo - node.start) >> cpw, ((hi - 1 - node.start) >> cpw) + 1)

    def windows(self, root: int, w0: int, n: int, pw: int):
        """Accumulate (count, min, max, sum) for ``n`` windows of 2**pw starting at offset ``w0``."""
        count = np.zeros(n, dtype=np.int64)
        vmin = np.full(n, np.inf)
        vmax = np.full(n, -np.inf)
        vsum = np.zeros(n)
        if root != NULL:
            acc = (count, vmin, vmax, vsum)
            self._windows(root, w0, w0 + (n << pw), pw, acc)
        return count, vmin, vmax, vsum

    def _windows(self, addr, u0, u1, pw, acc):
        count, vmin, vmax, vsum = acc
        node = self.heap.get(addr)
        if isinstance(node, Leaf):
            if node.times.size == 0:
                return
            u = to_offset(node.times)
            inside = (u >= np.uint64(u0)) & (u < np.uint64(u1))
            if not inside.any():
                return
            k = ((u[inside] - np.uint64(u0)) >> np.uint64(pw)).astype(np.int64)
            vals = node.values[inside]
            np.add.at(count, k, 1)
            np.minimum.at(vmin, k, vals)
            np.maximum.at(vmax, k, vals)
            np.add.at(vsum, k, vals)
            return
        cpw = node.child_pw
        for i in self._overlapping(node, u0, u1):
            if node.count[i] == 0:
                continue
            if cpw <= pw:
                # child lies inside exactly one window
                k = (node.child_start(i) - u0) >> pw
                count[k] += node.count[i]
                vmin[k] = min(vmin[k], node.vmin[i])
                vmax[k] = max(vmax[k], node.vmax[i])
                vsum[k] += node.vsum[i]
            else:
                self._windows(int(node.child[i]), u0, u1, pw, acc)

    def changed_windows(self, root: int, since: int, pw: int) -> set[int]:
        """Offsets of 2**pw windows holding points written or erased after ``since``."""
        out: set[int] = set()
        if root != NULL:
            self._changed(root, since, pw, out)
        return out

    def _changed(self, addr, since, pw, out):
        node = self.heap.get(addr)
        mask = np.uint64(~((1 << pw) - 1) & ((1 << 64) - 1))
        if isinstance(node, Leaf):
            hit = np.concatenate([node.times[node.wver > since], node.dead_times[node.dead_ver > since]])
            if hit.size:
                out.update(int(x) for x in np.unique(to_offset(hit) & mask))
            return
        cpw = node.child_pw
        for i in np.flatnonzero(node.ver > since):
            if cpw <= pw:
                out.add(node.child_start(int(i)) & int(mask))
            else:
                self._changed(int(node.child[i]), since, pw, out)

    def summary(self, root: int) -> Summary:
        if root == NULL:
            return Summary(0, np.inf, -np.inf, 0.0, -1)
        return self.heap.get(root).summary()

    def walk(self, root: int):
        """Yield every reachable node (used by consistency checks)."""
        if root == NULL:
            return
        stack = [root]
        while stack:
            node = self.heap.get(stack.pop())
            yield node
            if isinstance(node, Internal):
                stack.extend(int(a) for a in node.child if a != NULL)
