"""Timestamp streams, clock models and the frequency-correction primitive.

All times are signed 64-bit integer counts of 1 ps ticks.  A signed int64
spans about 106 days, far more than any run this package simulates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import OrderingError, ParameterError

TICKS_PER_SECOND = 10**12
TICKS_PER_NS = 1000

# Largest |du| for which the local-time mapping is treated as monotone.
MAX_DU = 1e-3

_RW_BLOCK = 1024  # random-walk knots drawn per seeded block


def seconds_to_ticks(seconds) -> int:
    return int(round(seconds * TICKS_PER_SECOND))


def ns_to_ticks(ns) -> int:
    return int(round(ns * TICKS_PER_NS))


def _as_ticks(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype != np.int64:
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
                raise ParameterError("tick values must be integers")
        arr = arr.astype(np.int64)
    return arr


def _check_sorted(ticks: np.ndarray, what="stream"):
    if ticks.size > 1:
        bad = np.flatnonzero(ticks[1:] < ticks[:-1])
        if bad.size:
            i = int(bad[0]) + 1
            raise OrderingError(
                f"{what} is not time ordered: tick[{i}]={ticks[i]} < tick[{i - 1}]={ticks[i - 1]}"
            )


@dataclass(frozen=True, eq=False)
class EventStream:
    """Detector clicks on one channel, non-decreasing int64 ticks.

    ``duration`` (seconds) is the acquisition length when known; otherwise the
    first-to-last span is used for rates.
    """

    ticks: np.ndarray
    channel: int = 0
    duration: float | None = None

    def __post_init__(self):
        ticks = _as_ticks(self.ticks)
        if ticks.ndim != 1:
            raise ParameterError("ticks must be one-dimensional")
        _check_sorted(ticks)
        view = ticks.view()
        view.flags.writeable = False
        object.__setattr__(self, "ticks", view)

    def __len__(self):
        return self.ticks.size

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return self.channel == other.channel and np.array_equal(self.ticks, other.ticks)

    __hash__ = None

    def __repr__(self):
        return f"EventStream(channel={self.channel}, n={len(self)}, span={self.span_seconds:.6g} s)"

    @property
    def span_seconds(self) -> float:
        if self.duration is not None:
            return float(self.duration)
        if len(self) < 2:
            return 0.0
        return (int(self.ticks[-1]) - int(self.ticks[0])) / TICKS_PER_SECOND

    @property
    def rate(self) -> float:
        """Mean event rate in counts/s (0 for an empty or zero-span stream)."""
        span = self.span_seconds
        return len(self) / span if span > 0 else 0.0

    @property
    def first(self) -> int:
        return int(self.ticks[0])

    @property
    def last(self) -> int:
        return int(self.ticks[-1])

    def window(self, start: int, stop: int) -> "EventStream":
        """Events with ``start <= t < stop``."""
        lo, hi = np.searchsorted(self.ticks, [start, stop])
        return EventStream(self.ticks[lo:hi], self.channel, (stop - start) / TICKS_PER_SECOND)

    def shifted(self, delta: int) -> "EventStream":
        return EventStream(self.ticks + np.int64(delta), self.channel, self.duration)

    def with_ticks(self, ticks) -> "EventStream":
        return EventStream(ticks, self.channel, self.duration)


def _ticks_of(stream) -> np.ndarray:
    if isinstance(stream, EventStream):
        return stream.ticks
    ticks = _as_ticks(stream)
    _check_sorted(ticks)
    return ticks


@lru_cache(maxsize=64)
def _rw_block(seed: int, block: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x52_57, block]))
    return rng.standard_normal(_RW_BLOCK)


@dataclass(frozen=True)
class ClockModel:
    """Maps true time to the reading of a free-running local clock.

    ``du(t) = du0 + drift_rate * t + w(t)`` where ``w`` is a random walk with
    ``rw_step`` standard deviation per 1 s step, linearly interpolated between
    whole seconds.  If ``rw_bound`` is set the walk is reflected to stay within
    ``[-rw_bound, rw_bound]``.  Local time is ``offset + t + integral(du)``.

    ``du0``, ``rw_step`` and ``rw_bound`` are dimensionless (1e-9 = 1 ppb);
    ``drift_rate`` is per second; ``offset`` is in ticks.
    """

    offset: int = 0
    du0: float = 0.0
    drift_rate: float = 0.0
    rw_step: float = 0.0
    seed: int = 0
    rw_bound: float | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def is_identity(self) -> bool:
        return self.offset == 0 and self.du0 == 0 and self.drift_rate == 0 and self.rw_step == 0

    def _knots(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Random-walk values and their running integral at seconds 0..n."""
        have = self._cache.get("knots")
        if have is not None and have[0].size > n:
            return have
        nblocks = n // _RW_BLOCK + 1
        steps = np.concatenate([_rw_block(self.seed, b) for b in range(nblocks)]) * self.rw_step
        walk = np.empty(steps.size + 1)
        walk[0] = 0.0
        if self.rw_bound is None:
            np.cumsum(steps, out=walk[1:])
        else:
            b = self.rw_bound
            w = 0.0
            for i, s in enumerate(steps):
                w += s
                # reflect until inside; steps are small compared with the bound
                while abs(w) > b:
                    w = 2 * b - w if w > b else -2 * b - w
                walk[i + 1] = w
        integral = np.concatenate(([0.0], np.cumsum(0.5 * (walk[1:] + walk[:-1]))))
        self._cache["knots"] = (walk, integral)
        return walk, integral

    def _walk(self, t: np.ndarray):
        """Random-walk value and integral at times t (seconds, clipped at 0)."""
        t = np.clip(t, 0.0, None)
        if self.rw_step == 0 or t.size == 0:
            return np.zeros_like(t), np.zeros_like(t)
        k = np.floor(t).astype(np.int64)
        walk, integral = self._knots(int(k.max()) + 1)
        f = t - k
        w0, w1 = walk[k], walk[k + 1]
        return w0 + (w1 - w0) * f, integral[k] + w0 * f + 0.5 * (w1 - w0) * f * f

    def du_at(self, t_seconds) -> np.ndarray:
        """Instantaneous frequency offset at true time ``t_seconds``."""
        t = np.asarray(t_seconds, dtype=float)
        w, _ = self._walk(t)
        return self.du0 + self.drift_rate * t + w

    def phase(self, t_ticks) -> np.ndarray:
        """Accumulated ``integral(du)`` from 0 to t, in (fractional) ticks."""
        t = np.asarray(t_ticks, dtype=np.int64).astype(float) / TICKS_PER_SECOND
        _, iw = self._walk(t)
        return (self.du0 * t + 0.5 * self.drift_rate * t * t + iw) * TICKS_PER_SECOND

    def check_span(self, t_lo: int, t_hi: int):
        ts = np.arange(np.floor(max(t_lo, 0) / TICKS_PER_SECOND), np.ceil(t_hi / TICKS_PER_SECOND) + 1)
        ts = np.concatenate((ts, [t_lo / TICKS_PER_SECOND, t_hi / TICKS_PER_SECOND]))
        worst = float(np.max(np.abs(self.du_at(ts))))
        if worst >= MAX_DU:
            raise ParameterError(f"|du| reaches {worst:.3g}, clock mapping must keep |du| < {MAX_DU:g}")

    def local(self, t_ticks) -> np.ndarray:
        """Local clock reading (int64 ticks) at true times ``t_ticks``."""
        t = np.asarray(t_ticks, dtype=np.int64)
        if self.is_identity:
            return t.copy()
        return t + np.int64(self.offset) + np.rint(self.phase(t)).astype(np.int64)

    def true(self, local_ticks) -> np.ndarray:
        """Inverse of :meth:`local`, exact to within 1 tick."""
        loc = np.asarray(local_ticks, dtype=np.int64)
        if self.is_identity:
            return loc.copy()
        base = loc - np.int64(self.offset)
        t = base.copy()
        # fixed point; contraction factor is |du| < 1e-3
        for _ in range(8):
            nxt = base - np.rint(self.phase(t)).astype(np.int64)
            if np.array_equal(nxt, t):
                break
            t = nxt
        return t

    def offset_at(self, t_ticks) -> np.ndarray:
        """``local(t) - t`` in ticks."""
        t = np.asarray(t_ticks, dtype=np.int64)
        return self.local(t) - t


def apply_clock(stream, clock: ClockModel) -> EventStream:
    """Read the true-time ``stream`` through ``clock``."""
    ticks = _ticks_of(stream)
    if ticks.size:
        clock.check_span(int(ticks[0]), int(ticks[-1]))
    out = clock.local(ticks)
    if isinstance(stream, EventStream):
        return stream.with_ticks(out)
    return EventStream(out)


def invert_clock(stream, clock: ClockModel) -> EventStream:
    """Map local readings back to true time (inverse of :func:`apply_clock`)."""
    ticks = _ticks_of(stream)
    out = clock.true(ticks)
    if isinstance(stream, EventStream):
        return stream.with_ticks(out)
    return EventStream(out)


def correct_frequency(stream, du: float, anchor: int | None = None) -> EventStream:
    """Rescale timestamps by ``1 + du`` around ``anchor``.

    ``t -> anchor + (t - anchor) * (1 + du)``, rounded to the nearest tick.
    This equals summing ``dt_i * du`` over consecutive separations, but is
    evaluated in closed form so rounding never accumulates.  ``anchor``
    defaults to the first timestamp.

    Float64 error of ``(t - anchor) * du`` stays below 1e-3 tick for any int64
    span with ``|du| < 1e-3``, so each output is within half a tick of exact.
    """
    ticks = _ticks_of(stream)
    if not -1.0 < du < 1.0:
        raise ParameterError(f"du={du} outside (-1, 1)")
    if ticks.size == 0 or du == 0:
        out = ticks.copy()
    else:
        a = int(ticks[0]) if anchor is None else int(anchor)
        delta = ticks - np.int64(a)
        out = ticks + np.rint(delta.astype(float) * du).astype(np.int64)
    if isinstance(stream, EventStream):
        return stream.with_ticks(out)
    return EventStream(out)


class Pairs(NamedTuple):
    t_a: np.ndarray
    t_b: np.ndarray
    tau: np.ndarray

    def __len__(self):
        return self.tau.size


def coincidence_pairs(a, b, center: int, window: int) -> Pairs:
    """Pair each ``a`` event with the ``b`` event whose ``t_a - t_b`` is nearest ``center``.

    A pair is kept when ``|tau - center| <= window / 2``; at most one pair per
    ``a`` event.  On an exact tie the earlier ``b`` event wins.
    """
    if window <= 0:
        raise ParameterError(f"coincidence window must be positive, got {window}")
    ta = _ticks_of(a)
    tb = _ticks_of(b)
    empty = np.empty(0, dtype=np.int64)
    if ta.size == 0 or tb.size == 0:
        return Pairs(empty, empty.copy(), empty.copy())
    target = ta - np.int64(center)
    idx = np.searchsorted(tb, target)
    left = np.clip(idx - 1, 0, tb.size - 1)
    right = np.clip(idx, 0, tb.size - 1)
    dl = np.abs(target - tb[left])
    dr = np.abs(tb[right] - target)
    pick = np.where(dr < dl, right, left)
    dist = np.minimum(dl, dr)
    keep = 2 * dist <= window
    t_a = ta[keep]
    t_b = tb[pick[keep]]
    return Pairs(t_a, t_b, t_a - t_b)
