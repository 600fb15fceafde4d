"""Built-in distiller kernels.

A kernel receives the joined sample times (int64 ns) and one value array per
input, and returns ``(times, values)``. Kernels must be pure and causal: an
output at time t may only depend on joined samples in ``[t - lag, t]``, and
must be computed from that slice alone so incremental and full runs agree
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..phasor import wrap_angles

KernelFn = Callable[..., tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class KernelInfo:
    fn: KernelFn
    n_inputs: int | None  # None: any number
    lag: Callable[[dict], int]  # lookback in ns given the kernel parameters


KERNELS: dict[str, KernelInfo] = {}


def kernel(name: str, n_inputs: int | None, lag: Callable[[dict], int] = lambda p: 0):
    def deco(fn):
        KERNELS[name] = KernelInfo(fn, n_inputs, lag)
        return fn

    return deco


@kernel("identity", 1)
def identity(times, values):
    return times, values[0]


@kernel("angle_difference", 2)
def angle_difference(times, values):
    """Wrapped difference of two angle streams (radians)."""
    return times, wrap_angles(values[0] - values[1])


@kernel("real_power", 4)
def real_power(times, values):
    """Re(V conj(I)) from (|V|, angle V, |I|, angle I)."""
    vm, va, im, ia = values
    return times, vm * im * np.cos(va - ia)


def _window_lag(params: dict) -> int:
    return int(params.get("window_ns", DEFAULT_WINDOW_NS))


DEFAULT_WINDOW_NS = 1 << 30  # about 1.07 s
DEFAULT_SLOPE_WINDOW_NS = 1 << 27  # about 134 ms, 16 reports at 120/s


@kernel("magnitude_correlation", 2, _window_lag)
def magnitude_correlation(times, values, window_ns: int = DEFAULT_WINDOW_NS, min_points: int = 3):
    """Pearson correlation per grid-aligned window, stamped at the window end."""
    if times.size == 0:
        return times, np.empty(0)
    w = int(window_ns)
    idx = times // w
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    ends = np.r_[starts[1:], times.size]
    out_t, out_v = [], []
    for a, b in zip(starts, ends):
        if b - a < min_points:
            continue
        x = values[0][a:b]
        y = values[1][a:b]
        x = x - math.fsum(x) / x.size
        y = y - math.fsum(y) / y.size
        den = math.sqrt(math.fsum(x * x) * math.fsum(y * y))
        if den == 0:
            continue
        out_t.append((int(idx[a]) + 1) * w)
        out_v.append(math.fsum(x * y) / den)
    return np.asarray(out_t, dtype=np.int64), np.asarray(out_v)


@kernel("frequency_deviation", 1, lambda p: int(p.get("window_ns", DEFAULT_SLOPE_WINDOW_NS)))
def frequency_deviation(times, values, window_ns: int = DEFAULT_SLOPE_WINDOW_NS, min_points: int = 4):
    """Least-squares slope of the unwrapped angle over [t - window, t], in Hz."""
    ang = values[0]
    n = times.size
    if n == 0:
        return times, np.empty(0)
    lo = np.searchsorted(times, times - int(window_ns), side="left")
    m = int((np.arange(n) - lo).max()) + 1
    # each row holds the window ending at sample i, padded at the front
    offs = np.arange(-m + 1, 1)
    idx = np.arange(n)[:, None] + offs[None, :]
    valid = idx >= lo[:, None]
    idx = np.clip(idx, 0, None)
    tt = (times[idx] - times[:, None]).astype(np.float64) * 1e-9
    a = ang[idx]
    # unwrap relative to the window's own first valid sample
    step = np.where(valid[:, 1:] & valid[:, :-1], wrap_angles(np.diff(a, axis=1)), 0.0)
    u = np.concatenate([np.zeros((n, 1)), np.cumsum(step, axis=1)], axis=1)
    cnt = valid.sum(axis=1)
    tt = np.where(valid, tt, 0.0)
    u = np.where(valid, u, 0.0)
    # sequential sums: leading zero padding leaves them bit-identical
    st, su = _rowsum(tt), _rowsum(u)
    stt, stu = _rowsum(tt * tt), _rowsum(tt * u)
    den = cnt * stt - st * st
    ok = (cnt >= min_points) & (den > 0)
    slope = (cnt[ok] * stu[ok] - st[ok] * su[ok]) / den[ok]
    return times[ok], slope / (2 * np.pi)


def _rowsum(a: np.ndarray) -> np.ndarray:
    return np.cumsum(a, axis=1)[:, -1]
