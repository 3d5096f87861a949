"""Poisson max-order statistics and the peak-finding success model.

Noise bins of a correlation histogram are iid Poisson with mean
``lambda_a = s1 * s2 * delta_t * T``.  The signal bin carries an additional
``nu * c_e * T / xi`` excess.  The largest of ``N`` noise bins follows
``P(X_max = x) = F(x)^N - F(x-1)^N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special, stats as sst

from .errors import ParameterError, RangeError

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)
MAX_LAMBDA = 1e9
NORMAL_SWITCH = 1e4

# Stirling-series coefficients for the log-gamma remainder
_S0, _S1, _S2, _S3, _S4 = 1 / 12, 1 / 360, 1 / 1260, 1 / 1680, 1 / 1188


def _stirlerr(n):
    """``log(n!) - [(n + 1/2) log n - n + log sqrt(2 pi)]`` for n >= 1."""
    n = np.asarray(n, dtype=float)
    out = np.empty_like(n)
    small = n <= 15
    if np.any(small):
        m = n[small]
        out[small] = special.gammaln(m + 1) - (m + 0.5) * np.log(m) + m - LOG_SQRT_2PI
    big = ~small
    if np.any(big):
        m = n[big]
        nn = m * m
        r = np.where(
            m > 500,
            (_S0 - _S1 / nn) / m,
            np.where(
                m > 80,
                (_S0 - (_S1 - _S2 / nn) / nn) / m,
                np.where(
                    m > 35,
                    (_S0 - (_S1 - (_S2 - _S3 / nn) / nn) / nn) / m,
                    (_S0 - (_S1 - (_S2 - (_S3 - _S4 / nn) / nn) / nn) / nn) / m,
                ),
            ),
        )
        out[big] = r
    return out


def _bd0(x, lam):
    """Deviance term ``x log(x/lam) + lam - x`` without cancellation."""
    x = np.asarray(x, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), x.shape)
    out = x * np.log(x / lam) + lam - x
    close = np.abs(x - lam) < 0.1 * (x + lam)
    if np.any(close):
        xc, lc = x[close], lam[close]
        v = (xc - lc) / (xc + lc)
        s = (xc - lc) * v
        ej = 2 * xc * v
        v2 = v * v
        done = np.zeros(xc.shape, dtype=bool)
        for j in range(1, 1000):
            ej = ej * v2
            s1 = s + ej / (2 * j + 1)
            done |= s1 == s
            s = np.where(done, s, s1)
            if done.all():
                break
        out[close] = s
    return out


def poisson_pmf(x, lam):
    """Poisson probability mass ``lam**x e^-lam / x!``.

    Evaluated with a saddle-point form (Stirling remainder plus deviance), so
    relative error stays near machine precision even for ``lam`` around 1e6.
    Negative ``x`` gives 0.  ``lam`` must be positive.
    """
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr <= 0):
        raise ParameterError("lambda must be positive")
    x_arr = np.asarray(x)
    x_arr, lam_arr = np.broadcast_arrays(x_arr.astype(float), lam_arr)
    out = np.zeros(x_arr.shape)
    neg = x_arr < 0
    zero = x_arr == 0
    pos = ~neg & ~zero
    out[zero] = np.exp(-lam_arr[zero])
    if np.any(pos):
        xv = np.floor(x_arr[pos])
        lv = lam_arr[pos]
        out[pos] = np.exp(-_stirlerr(xv) - _bd0(xv, lv)) / np.sqrt(2 * np.pi * xv)
    return out if out.ndim else float(out)


def poisson_cdf(x, lam):
    """``P(X <= x)``; 0 for negative ``x``."""
    return sst.poisson.cdf(x, lam)


def _ipow(base, n: int):
    """Elementwise ``base**n`` by repeated squaring (``n`` a non-negative int)."""
    base = np.asarray(base, dtype=float)
    result = np.ones_like(base)
    n = int(n)
    while n:
        if n & 1:
            result = result * base
        n >>= 1
        if n:
            base = base * base
    return result


def max_order_cdf(x, lam, n: int):
    """``P(max of n iid Poisson(lam) <= x)``."""
    return _ipow(poisson_cdf(x, lam), n)


def max_order_pmf(x, lam, n: int):
    """``P(max of n iid Poisson(lam) == x) = F(x)^n - F(x-1)^n``.

    Powers are taken by repeated squaring on CDF values in [0, 1].
    """
    if n < 1:
        raise ParameterError("N must be >= 1")
    x = np.asarray(x)
    if n == 1:
        return poisson_pmf(x, lam) if lam > 0 else np.where(x == 0, 1.0, 0.0)
    if lam <= 0:
        return np.where(x == 0, 1.0, 0.0)
    hi = poisson_cdf(x, lam)
    lo = poisson_cdf(x - 1, lam)
    out = _ipow(hi, n) - _ipow(lo, n)
    return out if np.ndim(out) else float(out)


def max_order_pmf_normal(x, lam, n: int):
    """Normal-approximation density of the maximum, ``n f(x) F(x)^(n-1)``.

    Each bin is modelled as N(lam, lam).  Evaluated in log space.
    """
    if lam <= 0:
        raise ParameterError("lambda must be positive")
    if n < 1:
        raise ParameterError("N must be >= 1")
    z = (np.asarray(x, dtype=float) - lam) / math.sqrt(lam)
    logf = sst.norm.logpdf(z) - 0.5 * math.log(lam)
    logF = sst.norm.logcdf(z)
    out = np.exp(math.log(n) + logf + (n - 1) * logF)
    return out if np.ndim(out) else float(out)


def poisson_upper(lam, p) -> int:
    """Smallest integer ``x`` with ``P(X > x) <= p`` (works for tiny ``p``)."""
    if lam <= 0:
        return 0
    lo = int(lam)
    if sst.poisson.sf(lo, lam) <= p:
        while lo > 0 and sst.poisson.sf(lo - 1, lam) <= p:
            lo -= 1
        return lo
    step = max(1, int(math.sqrt(lam)))
    hi = lo + step
    while sst.poisson.sf(hi, lam) > p:
        lo, hi = hi, hi + step
        step *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if sst.poisson.sf(mid, lam) > p:
            lo = mid
        else:
            hi = mid
    return hi


def max_order_support(lam, n: int, tail=1e-15) -> tuple[int, int]:
    """Integer range holding all but ``tail`` of the max-order mass."""
    if lam <= 0:
        return 0, 0
    # lower end: F(x)^n < tail  <=>  F(x) < tail**(1/n)
    lo = int(sst.poisson.ppf(math.exp(math.log(tail) / n), lam))
    hi = poisson_upper(lam, tail / n) + 1
    return max(lo - 1, 0), hi


def max_order_mean(lam, n: int) -> float:
    """Mean of the maximum of ``n`` iid Poisson(lam)."""
    lo, hi = max_order_support(lam, n)
    x = np.arange(lo, hi + 1)
    # E[X] = sum_{x>=0} P(X > x)
    tail_sum = float(np.sum(1.0 - max_order_cdf(x, lam, n)))
    return lo + tail_sum


def max_order_mean_normal(lam, n: int, points: int = 20001) -> float:
    """Mean of the normal-approximation maximum (numeric quadrature)."""
    s = math.sqrt(lam)
    lo = lam - 12 * s
    hi = lam + (math.sqrt(2 * math.log(max(n, 2))) + 12) * s
    x = np.linspace(lo, hi, points)
    return float(np.trapezoid(x * max_order_pmf_normal(x, lam, n), x))


def max_order_quantile(lam, n: int, alpha: float) -> int:
    """Smallest integer ``x`` with ``P(max of n noise bins > x) <= alpha``."""
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    if lam <= 0:
        return 0
    # per-bin exceedance p with 1 - (1-p)^n = alpha
    p = -math.expm1(math.log1p(-alpha) / n)
    x = poisson_upper(lam, p)
    while 1.0 - max_order_cdf(x, lam, n) > alpha:
        x += 1
    while x > 0 and 1.0 - max_order_cdf(x - 1, lam, n) <= alpha:
        x -= 1
    return x


def normal_max_quantile_sigma(n: int, alpha: float) -> float:
    """z such that the max of ``n`` standard normals exceeds z with probability ``alpha``."""
    p = -math.expm1(math.log1p(-alpha) / n)
    return float(sst.norm.isf(p))


@dataclass(frozen=True)
class SuccessModelParams:
    """Inputs of the peak-finding success model.

    ``delta_t`` in seconds, rates in counts/s.  When ``tau_c`` is given the
    in-bin excess rate is ``c_e = c * (1 - exp(-delta_t / tau_c))``; otherwise
    ``c`` is already the in-bin rate.  ``c_e`` may be set explicitly.
    """

    q: int
    delta_t: float
    s1: float
    s2: float
    c: float
    nu: float = 1.0
    du: float = 0.0
    tau_c: float | None = None
    c_e_override: float | None = None

    def __post_init__(self):
        if self.q < 0 or int(self.q) != self.q:
            raise ParameterError("q must be a non-negative integer")
        if self.delta_t <= 0:
            raise ParameterError("delta_t must be positive")
        if self.s1 < 0 or self.s2 < 0 or self.c < 0:
            raise ParameterError("rates must be non-negative")
        if not 0.5 <= self.nu <= 1.0:
            raise ParameterError(f"nu must lie in [0.5, 1], got {self.nu}")
        if self.tau_c is not None and self.tau_c <= 0:
            raise ParameterError("tau_c must be positive")

    @property
    def n(self) -> int:
        return 1 << self.q

    @property
    def T(self) -> float:
        return self.n * self.delta_t

    @property
    def lambda_a(self) -> float:
        return self.s1 * self.s2 * self.delta_t * self.T

    @property
    def xi(self) -> float:
        return max(1.0, self.n * abs(self.du))

    @property
    def c_e(self) -> float:
        if self.c_e_override is not None:
            return self.c_e_override
        if self.tau_c is None:
            return self.c
        return self.c * -math.expm1(-self.delta_t / self.tau_c)

    @property
    def excess(self) -> float:
        """Expected extra counts in the signal bin, ``nu c_e T / xi``."""
        return self.nu * self.c_e * self.T / self.xi

    @property
    def lambda_signal(self) -> float:
        return self.lambda_a + self.excess

    def to_dict(self):
        return {
            "q": self.q, "delta_t_s": self.delta_t, "s1": self.s1, "s2": self.s2,
            "c": self.c, "nu": self.nu, "du": self.du, "tau_c_s": self.tau_c,
            "c_e": self.c_e, "lambda_a": self.lambda_a, "xi": self.xi,
        }


def _signal_range(mu, tail=1e-16):
    if mu <= 0:
        return 0, 0
    lo = int(sst.poisson.ppf(tail, mu))
    hi = poisson_upper(mu, tail) + 1
    return max(lo, 0), hi


def success_probability(params: SuccessModelParams, model: str = "poisson") -> float:
    """Probability that the signal bin strictly exceeds every one of ``N - 1`` noise bins.

    ``model`` selects the noise-bin distribution: ``"poisson"`` (exact),
    ``"normal"`` (N(lambda, lambda) noise, evaluated on the Poisson signal
    support), or ``"auto"`` (normal above lambda = 1e4).  Ties count as
    failures.
    """
    lam = params.lambda_a
    mu = params.lambda_signal
    n = params.n
    if lam > MAX_LAMBDA or mu > MAX_LAMBDA:
        raise RangeError(f"lambda={max(lam, mu):.3g} beyond the supported range {MAX_LAMBDA:g}")
    if model == "auto":
        model = "normal" if lam > NORMAL_SWITCH else "poisson"
    if model not in ("poisson", "normal"):
        raise ParameterError(f"unknown model {model!r}")
    if n == 1:
        return 1.0
    if lam == 0:
        # noise bins are all zero; signal must be positive
        return float(-math.expm1(-mu)) if mu > 0 else 0.0
    lo, hi = _signal_range(mu)
    x = np.arange(lo, hi + 1)
    fsig = poisson_pmf(x, mu) if mu > 0 else np.where(x == 0, 1.0, 0.0)
    if model == "poisson":
        below = poisson_cdf(x - 1, lam)
        g = _ipow(below, n - 1)
    else:
        # continuous noise: P(noise < x) with the usual half-integer correction
        z = (x - 0.5 - lam) / math.sqrt(lam)
        g = np.exp((n - 1) * sst.norm.logcdf(z))
    return float(np.clip(np.sum(fsig * g), 0.0, 1.0))


class MCEstimate(NamedTuple):
    p: float
    successes: int
    trials: int
    ci_low: float
    ci_high: float

    @property
    def sigma(self) -> float:
        return math.sqrt(max(self.p * (1 - self.p), 1e-300) / self.trials)


def _wilson(k, n, z=1.959963984540054):
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    # the interval contains p exactly; rounding can push a bound past it at k=0 or k=n
    return max(0.0, min(p, centre - half)), min(1.0, max(p, centre + half))


class _MaxSampler:
    """Exact sampler for the maximum of ``m`` iid Poisson(lam) draws.

    Inverts the tabulated distribution ``P(max <= x) = F(x)^m`` with uniform
    variates.  ``F^m`` is built as ``exp(m * log1p(-sf))`` so the upper tail,
    where the maximum lives, keeps full relative precision.
    """

    def __init__(self, lam, m, tail=1e-15):
        lo, hi = max_order_support(lam, m, tail)
        self.x = np.arange(lo, hi + 1, dtype=np.int64)
        sf = sst.poisson.sf(self.x, lam)
        with np.errstate(divide="ignore"):
            g = np.exp(m * np.log1p(-sf))
        g[-1] = 1.0
        self.g = g

    def sample(self, rng, size):
        u = rng.random(size)
        return self.x[np.searchsorted(self.g, u, side="left")]


def success_probability_mc(params: SuccessModelParams, trials: int, seed: int = 0, batch: int = 4096,
                           method: str = "auto") -> MCEstimate:
    """Monte Carlo estimate of :func:`success_probability`.

    Each trial draws ``N - 1`` Poisson(lambda_a) noise bins and one
    Poisson(lambda_a + excess) signal bin; success iff the signal is strictly
    largest.  ``method="direct"`` draws every noise bin; ``"max"`` samples
    the noise maximum exactly without materialising the bins.  Batches are
    seeded from ``(seed, batch_index)`` so results do not depend on
    scheduling.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    lam = params.lambda_a
    mu = params.lambda_signal
    m = params.n - 1
    if method == "auto":
        method = "direct" if m <= 64 else "max"
    succ = 0
    done = 0
    b = 0
    sampler = _MaxSampler(lam, m) if (method == "max" and lam > 0 and m > 0) else None
    while done < trials:
        k = min(batch, trials - done)
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        sig = rng.poisson(mu, k) if mu > 0 else np.zeros(k, dtype=np.int64)
        if m == 0:
            noise_max = np.full(k, -1)
        elif lam == 0:
            noise_max = np.zeros(k, dtype=np.int64)
        elif method == "direct":
            noise_max = rng.poisson(lam, (k, m)).max(axis=1)
        else:
            noise_max = sampler.sample(rng, k)
        succ += int(np.count_nonzero(sig > noise_max))
        done += k
        b += 1
    lo, hi = _wilson(succ, trials)
    return MCEstimate(succ / trials, succ, trials, lo, hi)


def significance(c_e: float, n: int, s1: float, s2: float) -> float:
    """Legacy peak significance ``c_e * sqrt(N / (s1 s2))``."""
    if c_e < 0 or n <= 0 or s1 <= 0 or s2 <= 0:
        raise ParameterError("significance needs positive N, s1, s2 and c_e >= 0")
    return c_e * math.sqrt(n / (s1 * s2))
