"""Binned traces, FFT circular cross-correlation and g2 estimation.

Lag convention: lag ``k`` of a histogram corresponds to ``tau = t_a - t_b =
k * delta_t``.  FFT histograms use signed lags in ``[-N/2, N/2)``.
"""

from __future__ import annotations

import csv
import io as _io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.optimize import curve_fit

from .errors import FitError, ParameterError
from .timetag import TICKS_PER_NS, TICKS_PER_SECOND, EventStream, _ticks_of

log = logging.getLogger(__name__)

# Integer counts survive the float transform exactly while
# N * max(a) * max(b) stays below this.
EXACT_LIMIT = 2.0**52


@dataclass(frozen=True)
class GridParams:
    """Correlation grid: ``N = 2**q`` bins of ``delta_t`` ticks starting at ``origin``."""

    q: int
    delta_t: int
    origin: int = 0

    def __post_init__(self):
        if int(self.q) != self.q or self.q < 1 or self.q > 40:
            raise ParameterError(f"q must be an integer in [1, 40], got {self.q}")
        if int(self.delta_t) != self.delta_t or self.delta_t < 1:
            raise ParameterError(f"delta_t must be a positive integer tick count, got {self.delta_t}")

    @property
    def n(self) -> int:
        return 1 << self.q

    @property
    def span(self) -> int:
        """``T = N * delta_t`` in ticks."""
        return self.n * self.delta_t

    @property
    def span_seconds(self) -> float:
        return self.span / TICKS_PER_SECOND

    @property
    def delta_t_seconds(self) -> float:
        return self.delta_t / TICKS_PER_SECOND

    def with_origin(self, origin: int) -> "GridParams":
        return GridParams(self.q, self.delta_t, int(origin))

    def to_dict(self):
        return {"q": self.q, "delta_t_ps": self.delta_t, "origin_ps": self.origin}


@dataclass
class CorrelationHistogram:
    """Coincidence counts against lag.

    ``lags`` are integer bin indices (``tau = lag * delta_t``); ``span`` is the
    integration time in ticks used for normalization.
    """

    counts: np.ndarray
    lags: np.ndarray
    delta_t: int
    span: int
    totals: tuple[int, int]
    grid: GridParams | None = None
    normalized: np.ndarray | None = None
    errors: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def tau(self) -> np.ndarray:
        """Lag of each bin in ticks."""
        return self.lags.astype(np.int64) * self.delta_t

    def peak(self) -> int:
        """Index into ``counts`` of the maximum (first on ties)."""
        return int(np.argmax(self.counts))

    def ordered(self) -> "CorrelationHistogram":
        """Same histogram with bins sorted by lag."""
        order = np.argsort(self.lags, kind="stable")
        pick = lambda v: None if v is None else v[order]  # noqa: E731
        return CorrelationHistogram(
            self.counts[order], self.lags[order], self.delta_t, self.span, self.totals,
            self.grid, pick(self.normalized), pick(self.errors), dict(self.meta),
        )

    def to_csv(self, fh=None) -> str | None:
        """Write ``lag_ps,counts,g2,g2_err`` rows (blank g2 columns if not normalized)."""
        h = self.ordered()
        own = fh is None
        if own:
            fh = _io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lag_ps", "counts", "g2", "g2_err"])
        for i in range(h.counts.size):
            g = "" if h.normalized is None else repr(float(h.normalized[i]))
            e = "" if h.errors is None else repr(float(h.errors[i]))
            w.writerow([int(h.tau[i]), int(h.counts[i]), g, e])
        return fh.getvalue() if own else None


def bin_events(stream, grid: GridParams) -> np.ndarray:
    """Per-bin event counts, folding ``floor((t - origin)/delta_t)`` modulo N."""
    ticks = _ticks_of(stream)
    n = grid.n
    if ticks.size == 0:
        return np.zeros(n, dtype=np.int64)
    idx = np.floor_divide(ticks - np.int64(grid.origin), np.int64(grid.delta_t)) % n
    return np.bincount(idx, minlength=n).astype(np.int64)


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.size != b.size:
        raise ParameterError(f"traces must be 1-D of equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n == 0 or n & (n - 1):
        raise ParameterError(f"trace length must be a power of two, got {n}")
    return a, b


def spectrum(trace) -> np.ndarray:
    """Real-input forward transform, reusable across several :func:`xcorr` calls."""
    return sfft.rfft(np.asarray(trace, dtype=float))


def xcorr(a, b, spectrum_a=None) -> np.ndarray:
    """Circular cross-correlation ``r[k] = sum_n a[n] * b[(n + k) mod N]``.

    Computed as ``ifft(conj(fft(a)) * fft(b))`` and rounded to integers.
    Exact for integer traces while ``N * max|a| * max|b| < 2**52``.
    """
    a, b = _check_pair(a, b)
    n = a.size
    bound = float(n) * float(np.max(np.abs(a), initial=0)) * float(np.max(np.abs(b), initial=0))
    if bound >= EXACT_LIMIT:
        log.warning("xcorr: N*max(a)*max(b)=%.3g exceeds the exact-rounding bound", bound)
    fa = spectrum(a) if spectrum_a is None else spectrum_a
    fb = spectrum(b)
    r = sfft.irfft(np.conj(fa) * fb, n=n)
    return np.rint(r).astype(np.int64)


def xcorr_direct(a, b) -> np.ndarray:
    """O(N^2) reference for :func:`xcorr`."""
    a, b = _check_pair(a, b)
    a = a.astype(np.int64)
    b = b.astype(np.int64)
    return np.array([int(np.dot(a, np.roll(b, -k))) for k in range(a.size)], dtype=np.int64)


def signed_lags(n: int) -> np.ndarray:
    """Lag of each circular bin, in ``[-n/2, n/2)``."""
    k = np.arange(n, dtype=np.int64)
    return np.where(k >= n // 2, k - n, k)


def correlate(a, b, grid: GridParams, spectrum_a=None) -> CorrelationHistogram:
    """FFT coincidence histogram of streams ``a`` and ``b`` on ``grid``.

    Bin ``k`` collects pairs whose floor-bin difference is ``k``, so
    ``tau = t_a - t_b`` lies in ``((k-1)*delta_t, (k+1)*delta_t)``.
    ``spectrum_a`` may carry a precomputed :func:`spectrum` of ``a``'s trace,
    which saves one transform when ``b`` is varied against a fixed ``a``.
    """
    fa = spectrum(bin_events(a, grid)) if spectrum_a is None else spectrum_a
    tb = bin_events(b, grid)
    r = xcorr_from_spectra(spectrum(tb), fa, grid.n)
    return CorrelationHistogram(
        counts=r,
        lags=signed_lags(grid.n),
        delta_t=grid.delta_t,
        span=grid.span,
        totals=(int(np.rint(fa[0].real)), int(tb.sum())),
        grid=grid,
    )


def xcorr_from_spectra(fa, fb, n) -> np.ndarray:
    return np.rint(sfft.irfft(np.conj(fa) * fb, n=n)).astype(np.int64)


def pair_histogram(a, b, delta_t: int, max_lag: int, span: int | None = None) -> CorrelationHistogram:
    """Direct histogram of all ``tau = t_a - t_b`` with ``|tau| <= max_lag``.

    Bins are centred on ``k * delta_t``.  Unlike :func:`correlate` this needs
    no grid covering the whole acquisition, so it suits fine resolution over
    long runs.  ``span`` (ticks) defaults to the overlap of both streams.
    """
    ta = _ticks_of(a)
    tb = _ticks_of(b)
    if delta_t < 1 or max_lag < 0:
        raise ParameterError("delta_t must be >= 1 and max_lag >= 0")
    kmax = int(max_lag) // int(delta_t)
    nb = 2 * kmax + 1
    counts = np.zeros(nb, dtype=np.int64)
    if ta.size and tb.size:
        half = delta_t // 2
        lo_edge = -kmax * delta_t - half
        hi_edge = lo_edge + nb * delta_t
        # b events with t_a - hi_edge < t_b <= t_a - lo_edge
        lo = np.searchsorted(tb, ta - hi_edge, side="right")
        hi = np.searchsorted(tb, ta - lo_edge, side="right")
        n = hi - lo
        total = int(n.sum())
        if total:
            rep = np.repeat(np.arange(ta.size), n)
            offs = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
            tau = ta[rep] - tb[lo[rep] + offs]
            idx = (tau - lo_edge) // delta_t
            counts = np.bincount(idx, minlength=nb).astype(np.int64)
    if span is None:
        if ta.size and tb.size:
            span = max(0, min(ta[-1], tb[-1]) - max(ta[0], tb[0]))
        else:
            span = 0
    return CorrelationHistogram(
        counts=counts,
        lags=np.arange(-kmax, kmax + 1, dtype=np.int64),
        delta_t=int(delta_t),
        span=int(span),
        totals=(int(ta.size), int(tb.size)),
    )


def g2_normalize(hist: CorrelationHistogram, s1: float, s2: float, T: float | None = None) -> CorrelationHistogram:
    """Attach ``counts / (s1 s2 delta_t T)`` and its Poisson error bars.

    Rates in counts/s; ``T`` in seconds defaults to the histogram span.
    """
    if T is None:
        T = hist.span / TICKS_PER_SECOND
    if s1 <= 0 or s2 <= 0 or T <= 0:
        raise ParameterError(f"rates and T must be positive (s1={s1}, s2={s2}, T={T})")
    expected = s1 * s2 * (hist.delta_t / TICKS_PER_SECOND) * T
    c = hist.counts.astype(float)
    hist.normalized = c / expected
    hist.errors = np.sqrt(c) / expected
    hist.meta.update(s1=s1, s2=s2, T=T, accidentals_per_bin=expected)
    return hist


@dataclass
class G2Fit:
    g2_0: float
    tau_c: float  # seconds
    tau0: float  # seconds
    amplitude: float
    errors: dict
    residual_norm: float
    degenerate: bool = False

    def to_dict(self):
        return {
            "g2_0": self.g2_0,
            "amplitude": self.amplitude,
            "tau_c_ns": self.tau_c * 1e9,
            "tau0_ns": self.tau0 * 1e9,
            "errors": self.errors,
            "residual_norm": self.residual_norm,
            "degenerate": self.degenerate,
        }


def _g2_model(t, amp, tau_c, tau0):
    return 1.0 + amp * np.exp(-2.0 * np.abs(t - tau0) / tau_c)


def fit_g2(hist: CorrelationHistogram, max_nfev: int = 2000) -> G2Fit:
    """Least-squares fit of ``1 + A exp(-2|tau - tau0|/tau_c)`` to a normalized histogram.

    Returns ``tau_c``/``tau0`` in seconds.  A fit whose amplitude is not
    significant is returned with ``degenerate=True``.
    """
    if hist.normalized is None:
        raise ParameterError("histogram must be normalized before fitting")
    h = hist.ordered()
    y = h.normalized
    if y.size < 10:
        raise ParameterError(f"need at least 10 bins to fit, got {y.size}")
    t_ns = h.tau / TICKS_PER_NS
    sigma = h.errors if h.errors is not None else None
    if sigma is not None:
        sigma = np.where(sigma > 0, sigma, max(float(np.min(sigma[sigma > 0], initial=1.0)), 1e-12))

    base = float(np.median(y))
    if not np.any(y) or np.ptp(y) == 0:
        return G2Fit(1.0 + (base - 1.0), math.nan, math.nan, base - 1.0, {}, 0.0, degenerate=True)

    k = int(np.argmax(y))
    amp0 = max(float(y[k]) - 1.0, 1e-3)
    above = np.flatnonzero(y - 1.0 >= amp0 / 2)
    width = float(t_ns[above].max() - t_ns[above].min()) if above.size > 1 else float(h.delta_t / TICKS_PER_NS)
    width = max(width, h.delta_t / TICKS_PER_NS)
    p0 = [amp0, width / math.log(2.0), float(t_ns[k])]
    span = float(t_ns.max() - t_ns.min())
    bounds = ([-np.inf, 1e-6, t_ns.min()], [np.inf, 100 * span, t_ns.max()])
    try:
        popt, pcov = curve_fit(
            _g2_model, t_ns, y, p0=p0, sigma=sigma, absolute_sigma=sigma is not None,
            bounds=bounds, max_nfev=max_nfev,
        )
    except RuntimeError as exc:
        resid = y - _g2_model(t_ns, *p0)
        raise FitError(f"g2 fit did not converge: {exc}", residual_norm=float(np.linalg.norm(resid))) from exc
    perr = np.sqrt(np.clip(np.diag(pcov), 0, None)) if np.all(np.isfinite(pcov)) else np.full(3, np.inf)
    resid = y - _g2_model(t_ns, *popt)
    amp, tau_c, tau0 = (float(v) for v in popt)
    degenerate = not (np.isfinite(perr[0]) and abs(amp) > 3 * perr[0] and amp > 0)
    return G2Fit(
        g2_0=1.0 + amp,
        tau_c=tau_c * 1e-9,
        tau0=tau0 * 1e-9,
        amplitude=amp,
        errors={"amplitude": float(perr[0]), "tau_c_ns": float(perr[1]), "tau0_ns": float(perr[2])},
        residual_norm=float(np.linalg.norm(resid)),
        degenerate=degenerate,
    )


def capture_fraction(delta_t: float, tau_c: float) -> float:
    """Share of excess coincidences in one bin of width ``delta_t`` centred on the peak."""
    return 1.0 - math.exp(-delta_t / tau_c)


def floor_capture_fraction(delta_t: float, tau_c: float) -> float:
    """Share of excess coincidences landing in the peak lag of a floor-binned grid.

    With both streams binned by ``floor`` on a common grid and the true offset
    on a bin edge, the lag-0 bin collects pair delays with a triangular weight
    ``1 - |tau|/delta_t``.  Averaging the excess density against that weight
    gives ``(1 - e^{-2x}) - (1 - e^{-2x}(1 + 2x)) / (2x)`` with
    ``x = delta_t / tau_c``.
    """
    x = delta_t / tau_c
    e = math.exp(-2 * x)
    return (1 - e) - (1 - e * (1 + 2 * x)) / (2 * x)


def correlate_streams(a: EventStream, b: EventStream, grid: GridParams) -> CorrelationHistogram:
    """:func:`correlate` followed by normalization using the streams' own rates."""
    h = correlate(a, b, grid)
    T = grid.span_seconds
    s1 = h.totals[0] / T
    s2 = h.totals[1] / T
    if s1 > 0 and s2 > 0:
        g2_normalize(h, s1, s2, T)
    return h
