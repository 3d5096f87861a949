"""Initial timing and frequency offset between two timestamp streams.

Alignment model: ``t_a ~= t_b + tau + du * (t_b - t_ref)``.  Mapping ``b`` onto
``a``'s timebase is ``correct_frequency(b, du, anchor=t_ref)`` followed by a
shift of ``tau``.

Pipeline: a precompensation sweep over trial ``du`` values on a coarse grid,
then refinement levels with halved bin width, each re-estimating ``du`` from
the drift of the peak between an early and a late segment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .correlation import GridParams, bin_events, signed_lags, spectrum, xcorr_from_spectra
from .fftplan import xcorr32
from .errors import DataError, EstimationError, NotFoundError, ParameterError
from .stats import max_order_quantile, normal_max_quantile_sigma
from .timetag import TICKS_PER_NS, EventStream, _ticks_of, correct_frequency

log = logging.getLogger(__name__)


@dataclass
class PeakCandidate:
    """Result of one correlation at one resolution.

    ``tau`` (ticks) is ``center + lag * delta_t``; ``significance`` is the
    peak excess over the noise mean in units of the noise standard deviation.
    """

    tau: int
    lag: int
    peak_counts: int
    noise_mean: float
    noise_std: float
    runner_up: int
    significance: float
    threshold_sigma: float
    accepted: bool
    reason: str
    grid: GridParams
    center: int = 0
    du: float = 0.0

    def to_dict(self):
        return {
            "tau_ps": int(self.tau),
            "lag": int(self.lag),
            "peak_counts": int(self.peak_counts),
            "noise_mean": float(self.noise_mean),
            "noise_std": float(self.noise_std),
            "runner_up": int(self.runner_up),
            "significance": float(self.significance),
            "threshold_sigma": float(self.threshold_sigma),
            "accepted": bool(self.accepted),
            "reason": self.reason,
            "du": float(self.du),
            "center_ps": int(self.center),
            "grid": self.grid.to_dict(),
        }


def _span_ticks(stream) -> int:
    if isinstance(stream, EventStream) and stream.duration is not None:
        return int(round(stream.duration * 1e12))
    t = _ticks_of(stream)
    return int(t[-1] - t[0]) if t.size > 1 else 0


def _window(stream, start, stop):
    t = _ticks_of(stream)
    lo, hi = np.searchsorted(t, [start, stop])
    return t[lo:hi]


def threshold_for(noise_mean: float, bins: int, alpha: float) -> float:
    """Acceptance threshold in noise standard deviations.

    The larger of the normal max-order quantile for ``bins`` bins and the
    exact Poisson one (fatter tailed at small means), at false-accept
    probability ``alpha``.
    """
    z = normal_max_quantile_sigma(bins, alpha)
    if noise_mean > 0:
        x = max_order_quantile(noise_mean, bins, alpha)
        z = max(z, (x - noise_mean) / math.sqrt(noise_mean))
    return z


def _evaluate(counts, grid, center, search, threshold_sigma, alpha, du=0.0) -> PeakCandidate:
    n = grid.n
    lags = signed_lags(n)
    if search is None:
        pos = np.arange(n)
    else:
        lo, hi = search
        pos = np.arange(lo, hi + 1) % n
    sub = counts[pos]
    k = int(np.argmax(sub))
    peak_pos = int(pos[k])
    peak = int(sub[k])
    mask = np.ones(n, dtype=bool)
    mask[[(peak_pos - 1) % n, peak_pos, (peak_pos + 1) % n]] = False
    noise = counts[mask]
    mean = float(noise.mean()) if noise.size else 0.0
    std = float(noise.std()) if noise.size > 1 else 0.0
    others = np.delete(sub, k)
    runner = int(others.max()) if others.size else 0
    thr = threshold_sigma if threshold_sigma is not None else threshold_for(mean, sub.size, alpha)
    if std > 0:
        sig = (peak - mean) / std
    else:
        sig = math.inf if peak > mean else 0.0
    accepted = sig > thr and peak >= math.ceil(mean)
    reason = "accepted" if accepted else f"peak {sig:.2f} sigma below threshold {thr:.2f}"
    lag = int(lags[peak_pos])
    return PeakCandidate(
        tau=int(center + lag * grid.delta_t),
        lag=lag,
        peak_counts=peak,
        noise_mean=mean,
        noise_std=std,
        runner_up=runner,
        significance=float(sig),
        threshold_sigma=float(thr),
        accepted=bool(accepted),
        reason=reason,
        grid=grid,
        center=int(center),
        du=du,
    )


def _segment_traces(a, b, grid, center):
    """Traces of a on [origin, origin+T) and of b on the same window moved by -center."""
    T = grid.span
    ta = _window(a, grid.origin, grid.origin + T)
    tb = _window(b, grid.origin - center, grid.origin - center + T)
    tr_a = bin_events(ta, grid)
    tr_b = bin_events(tb, grid.with_origin(grid.origin - center))
    return tr_a, tr_b


def _check_span(stream, grid, what):
    span = _span_ticks(stream)
    if span < grid.span:
        raise DataError(
            f"stream {what} spans {span / 1e12:.6g} s, shorter than the grid span T={grid.span_seconds:.6g} s"
        )


def find_once(a, b, grid: GridParams, threshold_sigma: float | None = None, *, center: int = 0,
              search_halfwidth: int | None = None, alpha: float = 1e-3) -> PeakCandidate:
    """Correlate ``a`` and ``b`` on ``grid`` and locate the coincidence peak.

    ``b`` is read over the grid window moved by ``-center`` so that a true
    offset near ``center`` yields a lag near 0.  With ``search_halfwidth``
    only lags within that many bins of 0 are searched.  The candidate is
    accepted iff the peak exceeds the noise mean by ``threshold_sigma``
    standard deviations (default: max-order quantile at false-accept
    ``alpha`` for the number of searched bins).
    """
    _check_span(a, grid, "a")
    _check_span(b, grid, "b")
    tr_a, tr_b = _segment_traces(a, b, grid, center)
    counts = xcorr_from_spectra(spectrum(tr_b), spectrum(tr_a), grid.n)
    search = None if search_halfwidth is None else (-search_halfwidth, search_halfwidth)
    return _evaluate(counts, grid, center, search, threshold_sigma, alpha)


def _quick_z(r, k, n, total):
    """Peak z-score of ``r`` at ``k`` against all bins but ``k-1..k+1``.

    ``total`` is the exact sum of ``r`` (product of the two event counts).
    Values are centred before squaring, so single precision is adequate.
    """
    near = r[[(k - 1) % n, k, (k + 1) % n]].astype(np.float64)
    m = n - 3
    mean = (total - near.sum()) / m
    d = r - np.float32(mean)
    ss = float(np.dot(d, d)) - float(np.dot(near - mean, near - mean))
    std = math.sqrt(max(ss, 0.0) / m)
    return (near[1] - mean) / std if std > 0 else 0.0


@dataclass
class SweepResult:
    du: float
    candidate: PeakCandidate
    evaluated: int
    degenerate: bool = False
    scores: list = field(default_factory=list)

    def to_dict(self):
        return {
            "du": self.du,
            "candidate": self.candidate.to_dict(),
            "evaluated": self.evaluated,
            "degenerate": self.degenerate,
        }


def sweep_grid(du_range, du_step) -> tuple[np.ndarray, bool]:
    """Trial ``du`` values: multiples of ``du_step`` inside ``du_range`` (always including the centre)."""
    lo, hi = du_range
    if du_step <= 0:
        raise ParameterError("du_step must be positive")
    if hi < lo:
        raise ParameterError("du_range must be (low, high) with low <= high")
    mid = 0.5 * (lo + hi)
    if du_step > hi - lo:
        return np.array([mid]), True
    kmin = math.ceil((lo - mid) / du_step - 1e-9)
    kmax = math.floor((hi - mid) / du_step + 1e-9)
    return mid + du_step * np.arange(kmin, kmax + 1), False


def sweep_precompensation(a, b, grid: GridParams, du_range=(-10e-6, 10e-6), du_step=100e-9, *,
                          center: int = 0, alpha: float = 1e-3, threshold_sigma=None,
                          fft: str = "scipy") -> SweepResult:
    """Try each trial ``du`` and keep the one giving the most significant peak.

    ``b`` is precompensated with ``correct_frequency(b, du, anchor=origin)``.
    Candidates are ranked with single-precision transforms; the winner is
    re-evaluated exactly.  ``fft`` picks the ranking backend (see
    :func:`wcps.fftplan.xcorr32`).  Ties go to the smallest ``|du|``, then
    the lowest ``du``.  Raises :class:`NotFoundError` if no trial is accepted.
    """
    grid_vals, degenerate = sweep_grid(du_range, du_step)
    _check_span(a, grid, "a")
    _check_span(b, grid, "b")
    T = grid.span
    n = grid.n
    ta = _window(a, grid.origin, grid.origin + T)
    tr_a = bin_events(ta, grid)
    xc = xcorr32(n, fft)
    fa32 = xc.spectrum(tr_a)
    tb_all = _ticks_of(b)
    # a-window moved by -center, padded for the largest correction in the sweep
    pad = int(max(abs(grid_vals).max(), 1e-12) * (T + abs(center)) * 2) + grid.delta_t
    lo_t, hi_t = grid.origin - center - pad, grid.origin - center + T + pad
    lo, hi = np.searchsorted(tb_all, [lo_t, hi_t])
    tb_local = tb_all[lo:hi]
    bgrid = grid.with_origin(grid.origin - center)
    rel0 = tb_local - np.int64(bgrid.origin)
    lever = (tb_local - np.int64(grid.origin)).astype(float)
    # float division floors exactly here: rel < 2**53 and a quotient is never
    # closer than 1/delta_t to the next integer
    dt = float(grid.delta_t)
    scores = []
    for du in grid_vals:
        # same rounding as correct_frequency(b, du, anchor=origin)
        rel = rel0 + np.rint(lever * du).astype(np.int64)
        w0, w1 = np.searchsorted(rel, [0, T])
        idx = (rel[w0:w1].astype(np.float64) / dt).astype(np.int64)
        r = xc(fa32, np.bincount(idx, minlength=n))
        k = int(np.argmax(r))
        z = _quick_z(r, k, n, float(ta.size) * float(w1 - w0))
        scores.append((float(du), z))
    best_i = max(range(len(scores)), key=lambda i: (round(scores[i][1], 9), -abs(scores[i][0]), -scores[i][0]))
    best_du = scores[best_i][0]
    tb = correct_frequency(tb_local, best_du, anchor=grid.origin).ticks
    w0, w1 = np.searchsorted(tb, [bgrid.origin, bgrid.origin + T])
    counts = xcorr_from_spectra(spectrum(bin_events(tb[w0:w1], bgrid)), spectrum(tr_a), n)
    cand = _evaluate(counts, grid, center, None, threshold_sigma, alpha, du=best_du)
    result = SweepResult(best_du, cand, len(scores), degenerate, scores)
    if degenerate:
        log.warning("precompensation sweep is degenerate: step %.3g exceeds range", du_step)
    if not cand.accepted:
        raise NotFoundError("no trial frequency offset produced an accepted peak", best=cand)
    return result


@dataclass
class DuEstimate:
    du: float
    tau_early: int
    tau_late: int
    center_early: int
    center_late: int
    early: PeakCandidate
    late: PeakCandidate

    @property
    def uncertainty(self) -> float:
        """Bin-width limited standard error of ``du``."""
        dt = self.early.grid.delta_t
        return math.sqrt(2.0) * dt / math.sqrt(6.0) / (self.center_late - self.center_early)


def estimate_du(a, b, tau: int, segment: int, q: int | None = None, *, grid: GridParams | None = None,
                search_halfwidth: int | None = None, alpha: float = 1e-3, start: int | None = None,
                stop: int | None = None) -> DuEstimate:
    """Frequency offset from the drift of the peak between the first and last segment.

    ``segment`` is the segment length in ticks and must be ``N * delta_t`` of
    the grid used (pass either ``grid`` or ``q``; ``delta_t = segment / 2**q``).
    Returns ``du = (tau_late - tau_early) / (centre_late - centre_early)``.
    """
    ta = _ticks_of(a)
    if ta.size == 0:
        raise EstimationError("stream a is empty")
    if grid is None:
        if q is None:
            raise ParameterError("pass grid or q")
        if segment % (1 << q):
            raise ParameterError("segment must be a multiple of 2**q ticks")
        grid = GridParams(q, segment // (1 << q))
    seg = grid.span
    start = int(ta[0]) if start is None else int(start)
    stop = int(ta[-1]) + 1 if stop is None else int(stop)
    if stop - start < 2 * seg:
        raise EstimationError(
            f"span {(stop - start) / 1e12:.6g} s is shorter than two segments of {seg / 1e12:.6g} s"
        )
    g_early = grid.with_origin(start)
    g_late = grid.with_origin(stop - seg)
    cands = []
    for g in (g_early, g_late):
        tr_a, tr_b = _segment_traces(a, b, g, tau)
        counts = xcorr_from_spectra(spectrum(tr_b), spectrum(tr_a), g.n)
        s = None if search_halfwidth is None else (-search_halfwidth, search_halfwidth)
        cands.append(_evaluate(counts, g, tau, s, None, alpha))
    early, late = cands
    if not (early.accepted and late.accepted):
        which = "early" if not early.accepted else "late"
        raise EstimationError(f"{which} segment peak rejected: {(early if which == 'early' else late).reason}")
    c_early = start + seg // 2
    c_late = stop - seg + seg // 2
    du = (late.tau - early.tau) / (c_late - c_early)
    return DuEstimate(du, early.tau, late.tau, c_early, c_late, early, late)


@dataclass
class FindResult:
    """Alignment ``t_a ~= t_b + tau + du * (t_b - t_ref)`` and its provenance."""

    tau: int
    du: float
    t_ref: int
    levels: list
    accepted: bool
    reason: str = "accepted"
    du_uncertainty: float = math.nan
    flagged: bool = False

    @property
    def delta_t(self) -> int:
        return self.levels[-1].grid.delta_t if self.levels else 0

    def align(self, b):
        """Map ``b`` onto ``a``'s timebase."""
        out = correct_frequency(b, self.du, anchor=self.t_ref)
        return out.shifted(self.tau)

    def tau_at(self, t_b) -> float:
        return self.tau + self.du * (np.asarray(t_b, dtype=float) - self.t_ref)

    def to_dict(self):
        return {
            "tau_ps": int(self.tau),
            "du": float(self.du),
            "t_ref_ps": int(self.t_ref),
            "accepted": bool(self.accepted),
            "reason": self.reason,
            "flagged": bool(self.flagged),
            "du_uncertainty": float(self.du_uncertainty),
            "levels": [lv.to_dict() for lv in self.levels],
        }


def refine(a, b, initial: FindResult, target_delta_t: int, *, alpha: float = 1e-3,
           span: tuple[int, int] | None = None) -> FindResult:
    """Hierarchical refinement down to ``target_delta_t``.

    N stays fixed and the bin width halves per level (the last level lands on
    ``target_delta_t`` exactly).  Each level aligns ``b`` with the current
    estimate, searches a small lag window around zero in an early and a late
    segment, and folds the residual offset and frequency into the estimate.
    A level that fails ends the refinement; the last good estimate is
    returned with ``flagged=True``.
    """
    if not initial.accepted:
        raise ParameterError("refine needs an accepted initial result")
    if not initial.levels:
        raise ParameterError("initial result carries no levels")
    g0 = initial.levels[-1].grid
    dt = g0.delta_t
    if target_delta_t >= dt:
        return initial
    ta = _ticks_of(a)
    start, stop = span if span is not None else (int(ta[0]), int(ta[-1]) + 1)
    tau, du, t_ref = initial.tau, initial.du, initial.t_ref
    du_unc = initial.du_uncertainty if math.isfinite(initial.du_uncertainty) else 0.0
    levels = list(initial.levels)
    prev_dt = dt
    while dt > target_delta_t:
        dt = max(dt // 2, int(target_delta_t))
        grid = GridParams(g0.q, dt)
        est = FindResult(tau, du, t_ref, levels, True)
        bb = est.align(b)
        drift = du_unc * (stop - start)
        h = int(math.ceil((drift + prev_dt) / dt)) + 2
        h = min(h, grid.n // 2 - 1)
        try:
            r = estimate_du(a, bb, 0, grid.span, grid=grid, search_halfwidth=h, alpha=alpha,
                            start=start, stop=stop)
        except (EstimationError, DataError) as exc:
            log.warning("refinement stopped at delta_t=%d ps: %s", dt, exc)
            return replace(est, reason=f"refinement stopped at delta_t={dt} ps: {exc}", flagged=True,
                           du_uncertainty=du_unc)
        eps_u = r.du
        eps0 = r.tau_early - eps_u * (r.center_early - t_ref)
        # compose the residual alignment with the current one
        tau = int(round(tau + eps0 + eps_u * tau))
        du = (1.0 + du) * (1.0 + eps_u) - 1.0
        du_unc = r.uncertainty
        levels.extend([r.early, r.late])
        prev_dt = dt
    return FindResult(tau, du, t_ref, levels, True, "accepted", du_uncertainty=du_unc)


@dataclass(frozen=True)
class FindConfig:
    q: int = 20
    delta_t: int = 1024 * TICKS_PER_NS
    du_range: tuple = (-10e-6, 10e-6)
    du_step: float = 100e-9
    target_delta_t: int = 256 * TICKS_PER_NS
    alpha: float = 1e-3
    center: int = 0
    fft: str = "scipy"

    def to_dict(self):
        return {
            "q": self.q, "delta_t_ps": self.delta_t, "du_range": list(self.du_range),
            "du_step": self.du_step, "target_delta_t_ps": self.target_delta_t, "alpha": self.alpha,
            "center_ps": self.center, "fft": self.fft,
        }


def find_offset(a, b, config: FindConfig = FindConfig()) -> FindResult:
    """Sweep then refine.  ``tau`` is referenced to the start of ``a``."""
    ta = _ticks_of(a)
    tb = _ticks_of(b)
    if ta.size == 0 or tb.size == 0:
        raise DataError("both streams must contain events")
    origin = int(ta[0])
    grid = GridParams(config.q, config.delta_t, origin)
    sw = sweep_precompensation(a, b, grid, config.du_range, config.du_step, center=config.center,
                               alpha=config.alpha, fft=config.fft)
    c = sw.candidate
    # within about delta_t / T of the truth the peak stays in one bin, so
    # the sweep cannot resolve du more finely than that
    du_unc = max(config.du_step / 2, grid.delta_t / grid.span)
    initial = FindResult(c.tau, sw.du, origin, [c], True, du_uncertainty=du_unc)
    if sw.degenerate:
        initial.flagged = True
        initial.reason = "degenerate sweep (step exceeds range)"
    return refine(a, b, initial, config.target_delta_t, alpha=config.alpha)
