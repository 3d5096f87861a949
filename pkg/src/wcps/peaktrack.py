"""Streaming coincidence-peak tracker.

Each ``a`` event is paired with the nearest compensated ``b`` event inside a
window centred on the filtered offset ``tau'``.  Pair offsets feed an
exponential moving average; the frequency offset is re-estimated from the
slope of the served offset and applied to later ``b`` timestamps.

Processing runs in short chunks of ``a`` time (default ``beta / 10``) during
which the window centre is held fixed, so pairing and filtering vectorize.
Chunk boundaries sit on a fixed grid anchored at the first ``a`` event, which
makes the output independent of how events are fed in.
"""

from __future__ import annotations

import csv
import io as _io
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

from .errors import NotFoundError, OrderingError, ParameterError
from .timetag import TICKS_PER_NS, TICKS_PER_SECOND, _ticks_of, coincidence_pairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackerConfig:
    """Tracker settings.

    ``beta``, ``serve_interval``, ``chunk`` and ``starvation`` are in seconds;
    ``window`` and ``initial_tau`` in ticks.  ``freq_window`` is the number of
    serve intervals used for the frequency regression.
    """

    beta: float = 0.05
    window: int = 256 * TICKS_PER_NS
    serve_interval: float = 0.536870912
    freq_window: int = 20
    initial_tau: int = 0
    initial_du: float = 0.0
    compensate: bool = True
    chunk: float | None = None
    lost_z: float = 3.0
    lost_intervals: int = 3
    lost_wander: float = 0.125
    starvation: float = 1.0
    recover: bool = False

    def __post_init__(self):
        if self.beta <= 0:
            raise ParameterError("beta must be positive")
        if self.window <= 0:
            raise ParameterError("window must be positive")
        if self.serve_interval <= 0:
            raise ParameterError("serve_interval must be positive")
        if self.freq_window < 2:
            raise ParameterError("freq_window must be at least 2 intervals")
        if self.lost_intervals < 1:
            raise ParameterError("lost_intervals must be >= 1")

    @property
    def serve_ticks(self) -> int:
        return int(round(self.serve_interval * TICKS_PER_SECOND))

    @property
    def chunks_per_interval(self) -> int:
        want = self.chunk if self.chunk is not None else self.beta / 10
        return max(1, math.ceil(self.serve_interval / want))

    def to_dict(self):
        return asdict(self)


@dataclass
class ServedSample:
    t: int  # a-time of the sample, ticks
    tau: float  # served t_a - t_b, ticks
    du: float
    pairs_per_s: float
    accidentals_per_s: float
    alpha: float
    excess_z: float

    def row(self):
        return [
            repr(self.t / TICKS_PER_SECOND),
            repr(round(self.tau, 3)),
            repr(self.du * 1e9),
            repr(self.pairs_per_s),
            repr(self.accidentals_per_s),
        ]


LOG_HEADER = ["t_s", "tau_ps", "du_ppb", "pairs_per_s", "accidentals_per_s"]


def serve_log(samples, fh=None) -> str | None:
    """Write served samples as ``t_s,tau_ps,du_ppb,pairs_per_s,accidentals_per_s``.

    ``pairs_per_s`` counts window pairs under the one-pair-per-``a``-event
    rule; ``accidentals_per_s`` is the matching uncorrelated expectation
    ``s_a (1 - exp(-s_b w))``, which is ``s_a s_b w`` to first order.
    """
    own = fh is None
    if own:
        fh = _io.StringIO()
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for s in samples:
        w.writerow(s.row())
    return fh.getvalue() if own else None


def accidental_pair_rate(s_a: float, s_b: float, window_s: float) -> float:
    """Expected uncorrelated pair rate with at most one pair per ``a`` event."""
    return s_a * -math.expm1(-s_b * window_s)


def tracking_gain(c: float, s1: float, s2: float, window_s: float, tau_c: float) -> float:
    """Restoring strength of the filtered offset towards the true peak.

    For offset error ``e`` the mean pair offset moves by ``(1 - gain) * e``, so
    the filter relaxes with time constant ``beta / gain``.  Signal density is
    ``(c / tau_c) exp(-2|tau| / tau_c)``.
    """
    x = window_s / tau_c
    inside = c * -math.expm1(-x)
    edge = c * x * math.exp(-x)
    total = accidental_pair_rate(s1, s2, window_s) + inside
    return (inside - edge) / total if total > 0 else 0.0


def expected_lag(du: float, beta: float, gain: float = 1.0) -> float:
    """Steady-state offset error (seconds) under a constant uncompensated ``du``.

    A ramp of slope ``du`` through a first-order filter with time constant
    ``beta / gain`` trails by ``du * beta / gain``.  ``gain`` is
    :func:`tracking_gain`; 1 recovers the bare filter lag.
    """
    if gain <= 0:
        raise ParameterError("gain must be positive")
    return du * beta / gain


def initial_offset(tau: float, du: float, t_ref: int, t_start: int) -> int:
    """Tracker ``initial_tau`` for an alignment ``t_a = t_b + tau + du (t_b - t_ref)``.

    The tracker anchors its frequency correction at b-time
    ``t_start - initial_tau``; this solves for the offset at that point.
    """
    return int(round((tau + du * (t_start - t_ref)) / (1.0 + du)))


def _detrended_std(values) -> float:
    """Standard deviation about the least-squares line through ``values``."""
    y = np.asarray(values, dtype=float)
    if y.size < 3:
        return 0.0
    x = np.arange(y.size, dtype=float)
    x -= x.mean()
    yc = y - y.mean()
    resid = yc - x * (np.dot(x, yc) / np.dot(x, x))
    return float(np.sqrt(np.mean(resid**2)))


class _Buffer:
    """Append-only int64 buffer with a consumed-prefix pointer."""

    def __init__(self):
        self.data = np.empty(0, dtype=np.int64)
        self.start = 0
        self.last = None

    def extend(self, ticks, what):
        t = np.asarray(ticks, dtype=np.int64)
        if t.size == 0:
            return
        if self.last is not None and t[0] < self.last:
            raise OrderingError(f"{what}: event {int(t[0])} arrived after {self.last}")
        bad = np.flatnonzero(t[1:] < t[:-1])
        if bad.size:
            i = int(bad[0]) + 1
            raise OrderingError(f"{what}: tick[{i}]={int(t[i])} < tick[{i - 1}]={int(t[i - 1])}")
        self.last = int(t[-1])
        if self.start == self.data.size:
            self.data = t.copy()
        else:
            self.data = np.concatenate((self.data[self.start:], t))
        self.start = 0

    def view(self):
        return self.data[self.start:]

    def drop_before(self, tick):
        self.start += int(np.searchsorted(self.data[self.start:], tick))


class Tracker:
    """Sequential tracker; feed both channels in time order per channel.

    ``feed``/``push`` return the samples served as a result of that call.
    """

    def __init__(self, config: TrackerConfig = TrackerConfig(), channels=(1, 2), keep_history=False):
        self.config = config
        self.history = [] if keep_history else None
        self.channels = tuple(channels)
        self._a = _Buffer()
        self._b = _Buffer()
        self.closed = False
        self.lost = False
        self.lost_at: int | None = None
        self.lost_reason = ""
        self.samples: list[ServedSample] = []
        cfg = config
        self.tau_f = 0.0  # filtered residual offset tau'
        self.du = cfg.initial_du  # frequency offset currently applied
        self.du_est = cfg.initial_du  # latest regression estimate
        # b compensation: C(t) = t + off0 + rint((t - anchor) * du)
        self._anchor = None
        self._off0 = int(cfg.initial_tau)
        self.alpha = None
        self.t_start = None
        self._k = 0  # next chunk index
        self._cpi = cfg.chunks_per_interval
        self._chunk_ticks = cfg.serve_ticks // self._cpi
        self._serve_ticks = self._chunk_ticks * self._cpi
        self._int_pairs = 0
        self._int_a = 0
        self._int_b = 0
        self._int_tau = []
        self._weak = 0
        self._reg = deque(maxlen=cfg.freq_window * self._cpi)
        self._last_pair_t = None
        self.total_pairs = 0

    # -- compensation map --------------------------------------------------
    def _comp(self, t):
        t = np.asarray(t, dtype=np.int64)
        if self._anchor is None:
            return t + np.int64(self._off0)
        shift = np.rint((t - np.int64(self._anchor)).astype(float) * self.du).astype(np.int64)
        return t + np.int64(self._off0) + shift

    def _offset_at(self, t_b) -> float:
        """``C(t_b) - t_b`` in ticks."""
        if self._anchor is None:
            return float(self._off0)
        return self._off0 + (t_b - self._anchor) * self.du

    def _set_du(self, du_new, t_b):
        """Re-anchor C at b-time ``t_b`` so it stays continuous."""
        if self._anchor is not None:
            self._off0 = int(self._off0 + round((t_b - self._anchor) * self.du))
        self._anchor = int(t_b)
        self.du = du_new

    # -- feeding -----------------------------------------------------------
    def feed(self, channel, ticks) -> list[ServedSample]:
        if self.closed:
            raise ParameterError("tracker is closed")
        ticks = _ticks_of(ticks) if not isinstance(ticks, np.ndarray) else ticks
        if channel == self.channels[0]:
            self._a.extend(ticks, f"channel {channel}")
        elif channel == self.channels[1]:
            self._b.extend(ticks, f"channel {channel}")
        else:
            raise ParameterError(f"unknown channel {channel}")
        return self._run()

    def push(self, channel, tick) -> list[ServedSample]:
        return self.feed(channel, np.array([tick], dtype=np.int64))

    def close(self) -> list[ServedSample]:
        out = self._run(final=True)
        self.closed = True
        return out

    # -- core ----------------------------------------------------------------
    def _ready(self, a_end, b_need):
        if self._b.last is None:
            return False
        return self._b.last + self._offset_at(self._b.last) >= b_need

    def _run(self, final=False) -> list[ServedSample]:
        out = []
        if self.t_start is None:
            if self._a.last is None:
                return out
            self.t_start = int(self._a.view()[0])
            if self._anchor is None:
                self._anchor = self.t_start - self.config.initial_tau
        half = self.config.window // 2
        while not self.lost:
            a0 = self.t_start + self._k * self._chunk_ticks
            a1 = a0 + self._chunk_ticks
            center = int(round(self.tau_f))
            b_need = a1 - center + half + 1
            # a chunk is only processed once all of its a events are known
            if self._a.last < a1:
                break
            if not final and not self._ready(a1, b_need):
                break
            s = self._chunk(a0, a1, center, half)
            if s is not None:
                out.append(s)
            self._k += 1
        return out

    def _chunk(self, a0, a1, center, half):
        cfg = self.config
        av = self._a.view()
        i0, i1 = np.searchsorted(av, [a0, a1])
        ta = av[i0:i1]
        bv = self._b.view()
        # raw b range covering compensated [a0 - center - half, a1 - center + half]
        off = self._offset_at(a0 - center - self._off0)
        margin = 1 + int(abs(self.du) * (a1 - a0)) + 1000
        lo_raw = a0 - center - half - int(off) - margin
        hi_raw = a1 - center + half - int(off) + margin
        j0, j1 = np.searchsorted(bv, [lo_raw, hi_raw])
        tb = self._comp(bv[j0:j1])
        k0, k1 = np.searchsorted(tb, [a0 - center - half, a1 - center + half + 1])
        tb = tb[k0:k1]
        pairs = coincidence_pairs(ta, tb, center, cfg.window) if ta.size and tb.size else None
        n_pairs = 0 if pairs is None else len(pairs)
        if n_pairs:
            if self.alpha is None:
                dt_mean = (a1 - a0) / TICKS_PER_SECOND / n_pairs
                self._set_alpha(dt_mean)
            al = self.alpha
            y, _ = lfilter([al], [1.0, -(1.0 - al)], pairs.tau.astype(float), zi=[(1.0 - al) * self.tau_f])
            self.tau_f = float(y[-1])
            self._last_pair_t = int(pairs.t_a[-1])
        self._int_pairs += n_pairs
        self.total_pairs += n_pairs
        self._int_a += ta.size
        self._int_b += int(np.count_nonzero((tb >= a0 - center) & (tb < a1 - center)))
        # regression sample: raw offset at chunk end against b-time
        tb_end = a1 - self.tau_f - self._offset_at(a1 - self._off0)
        tau_raw = self.tau_f + self._offset_at(tb_end)
        self._reg.append((tb_end, tau_raw))
        self._int_tau.append(self.tau_f)
        if self.history is not None:
            self.history.append((a1, tau_raw))
        # release consumed events
        self._a.drop_before(a1)
        self._b.drop_before(lo_raw + (a1 - a0) - cfg.window)
        if self._last_pair_t is not None:
            since = (a1 - self._last_pair_t) / TICKS_PER_SECOND
        else:
            since = (a1 - self.t_start) / TICKS_PER_SECOND
        if since > cfg.starvation:
            self._mark_lost(a1, f"no pair for {since:.3g} s")
            return None
        if (self._k + 1) % self._cpi == 0:
            return self._serve(a1, tau_raw, tb_end)
        return None

    def _set_alpha(self, dt_mean):
        self.alpha = -math.expm1(-dt_mean / self.config.beta)

    def _serve(self, t, tau_raw, tb_end):
        cfg = self.config
        T = self._serve_ticks / TICKS_PER_SECOND
        s_a = self._int_a / T
        s_b = self._int_b / T
        w = cfg.window / TICKS_PER_SECOND
        acc_rate = accidental_pair_rate(s_a, s_b, w)
        acc = acc_rate * T
        pairs = self._int_pairs
        z = (pairs - acc) / math.sqrt(acc) if acc > 0 else (math.inf if pairs else 0.0)
        if pairs:
            self._set_alpha(T / pairs)
        # frequency from the slope of the served offset
        if len(self._reg) == self._reg.maxlen:
            x = np.array([r[0] for r in self._reg], dtype=float)
            y = np.array([r[1] for r in self._reg], dtype=float)
            x -= x.mean()
            slope = float(np.dot(x, y - y.mean()) / np.dot(x, x))
            self.du_est = slope
            if cfg.compensate:
                step = (1.0 + slope) / (1.0 + self.du) - 1.0
                self._set_du((1.0 + self.du) * (1.0 + step) - 1.0, tb_end)
        served_du = self.du if cfg.compensate else self.du_est
        wander = _detrended_std(self._int_tau)
        sample = ServedSample(int(t), float(tau_raw), served_du, pairs / T, acc_rate, float(self.alpha or 0.0), z)
        self.samples.append(sample)
        self._int_pairs = self._int_a = self._int_b = 0
        self._int_tau = []
        limit = cfg.lost_wander * cfg.window
        if z < cfg.lost_z or wander > limit:
            self._weak += 1
            if self._weak >= cfg.lost_intervals:
                why = (f"pair excess {z:.2f} sigma below {cfg.lost_z}" if z < cfg.lost_z
                       else f"filtered offset wanders {wander / TICKS_PER_NS:.0f} ns, over {limit / TICKS_PER_NS:.0f} ns")
                self._mark_lost(t, f"{why} for {self._weak} intervals")
        else:
            self._weak = 0
        return sample

    def _mark_lost(self, t, reason):
        self.lost = True
        self.lost_at = int(t)
        self.lost_reason = reason
        log.warning("tracking lost at %.6f s: %s", t / TICKS_PER_SECOND, reason)

    def state(self) -> dict:
        return {
            "tau_filtered_ps": self.tau_f,
            "du": self.du,
            "du_estimate": self.du_est,
            "alpha": self.alpha,
            "pairs": self.total_pairs,
            "lost": self.lost,
            "lost_at_ps": self.lost_at,
        }


@dataclass
class TrackResult:
    samples: list
    lost_at: list = field(default_factory=list)
    reasons: list = field(default_factory=list)
    recoveries: list = field(default_factory=list)

    @property
    def lost(self) -> bool:
        return bool(self.lost_at)

    def arrays(self):
        t = np.array([s.t for s in self.samples], dtype=np.int64)
        tau = np.array([s.tau for s in self.samples], dtype=float)
        du = np.array([s.du for s in self.samples], dtype=float)
        return t, tau, du

    def to_csv(self, fh=None):
        return serve_log(self.samples, fh)


def _recover(a, b, t_lost, tau_guess, du_guess, q=20, delta_t=1024 * TICKS_PER_NS, step=100e-9):
    """Reacquire after a loss: sweep ``du_guess`` and ``du_guess +- step`` on data after ``t_lost``."""
    from .correlation import GridParams
    from .peakfind import sweep_precompensation

    grid = GridParams(q, delta_t, int(t_lost))
    ta = _ticks_of(a)
    if ta.size == 0 or ta[-1] < t_lost + grid.span:
        return None
    try:
        sw = sweep_precompensation(a, b, grid, (du_guess - step, du_guess + step), step,
                                   center=int(round(tau_guess)))
    except (NotFoundError, Exception) as exc:  # noqa: BLE001
        log.warning("recovery failed: %s", exc)
        return None
    return sw


def track(a, b, config: TrackerConfig = TrackerConfig()) -> TrackResult:
    """Run the tracker over two complete streams (``a`` is the reference channel)."""
    ta = _ticks_of(a)
    tb = _ticks_of(b)
    result = TrackResult([])
    cfg = config
    start = None
    while True:
        tr = Tracker(cfg)
        if start is None:
            tr.feed(1, ta)
            tr.feed(2, tb)
        else:
            tr.feed(1, ta[np.searchsorted(ta, start):])
            tr.feed(2, tb[np.searchsorted(tb, start - cfg.initial_tau - cfg.window):])
        tr.close()
        result.samples.extend(tr.samples)
        if not tr.lost:
            break
        result.lost_at.append(tr.lost_at)
        result.reasons.append(tr.lost_reason)
        if not cfg.recover:
            break
        last_tau = tr.samples[-1].tau if tr.samples else float(cfg.initial_tau)
        sw = _recover(ta, tb, tr.lost_at, last_tau, tr.du)
        if sw is None:
            break
        grid = sw.candidate.grid
        new_start = grid.origin + grid.span
        # offset at the recovery origin, projected to where tracking resumes
        tau0 = sw.candidate.tau + sw.du * (new_start - grid.origin)
        result.recoveries.append(int(new_start))
        cfg = replace(cfg, initial_tau=int(round(tau0)), initial_du=sw.du)
        start = new_start
    return result
