"""Simulated detector streams with a bunched cross-correlation.

The two streams realize ``g2(tau) = 1 + (g2_peak - 1) * exp(-2|tau|/tau_c)``
by pair injection: every channel-1 click gets, with probability ``p``, a
partner click on channel 2 displaced by a Laplace-distributed delay of scale
``tau_c / 2``.  Independent background fills channel 2 up to its requested
rate.  The excess coincidence rate integrated over all delays is
``c = (g2_peak - 1) * s1 * s2 * tau_c`` and ``p = c / s1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ParameterError
from .timetag import TICKS_PER_SECOND, EventStream

# Internal generation block.  Fixed so output never depends on how a caller
# consumes the chunks.
BLOCK_SECONDS = 1.0

_PRIMARY, _PAIR, _BG2, _DARK1, _DARK2, _JIT1, _JIT2, _DELAY = range(8)


@dataclass(frozen=True)
class SourceParams:
    """Bunched-light source and detector parameters (SI units).

    ``s1``/``s2`` are photon detection rates; dark counts add on top.
    """

    g2_peak: float = 1.42
    tau_c: float = 180e-9
    s1: float = 192e3
    s2: float = 182e3
    dark1: float = 0.0
    dark2: float = 0.0
    jitter_sigma: float = 20e-12
    dead_time: float = 0.0
    duration: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 1.0 < self.g2_peak <= 1.5:
            raise ParameterError(f"g2_peak must satisfy 1 < g2_peak <= 1.5, got {self.g2_peak}")
        if self.tau_c <= 0:
            raise ParameterError("tau_c must be positive")
        for name in ("s1", "s2", "dark1", "dark2", "jitter_sigma", "dead_time", "duration"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")

    @property
    def excess_rate(self) -> float:
        """Total excess coincidence rate ``c`` in counts/s."""
        return (self.g2_peak - 1.0) * self.s1 * self.s2 * self.tau_c


@dataclass(frozen=True)
class PairSourceParams:
    """Generic correlated-stream source: background plus injected pairs.

    Covers both bunched light (see :meth:`from_source`) and photon-pair
    sources whose peak exceeds ``g2 = 1.5``.
    """

    s1: float
    s2: float
    pair_rate: float
    tau_c: float
    duration: float
    seed: int = 0
    dark1: float = 0.0
    dark2: float = 0.0
    jitter_sigma: float = 0.0
    dead_time: float = 0.0

    def __post_init__(self):
        if self.tau_c <= 0:
            raise ParameterError("tau_c must be positive")
        for name in ("s1", "s2", "pair_rate", "dark1", "dark2", "jitter_sigma", "dead_time", "duration"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.pair_rate > 0:
            if self.s1 == 0 or self.pair_rate / self.s1 > 1:
                raise ParameterError(
                    f"partner probability p = c/s1 = {self.pair_rate}/{self.s1} exceeds 1"
                )
            if self.pair_rate > self.s2:
                raise ParameterError(
                    f"pair rate {self.pair_rate:g}/s exceeds channel-2 rate {self.s2:g}/s"
                )

    @classmethod
    def from_source(cls, p: SourceParams) -> "PairSourceParams":
        return cls(
            s1=p.s1,
            s2=p.s2,
            pair_rate=p.excess_rate,
            tau_c=p.tau_c,
            duration=p.duration,
            seed=p.seed,
            dark1=p.dark1,
            dark2=p.dark2,
            jitter_sigma=p.jitter_sigma,
            dead_time=p.dead_time,
        )

    @property
    def pair_probability(self) -> float:
        return self.pair_rate / self.s1 if self.s1 else 0.0


def _rng(seed, block, purpose):
    return np.random.default_rng(np.random.SeedSequence([seed, block, purpose]))


def _poisson_times(rng, rate, t0, t1):
    """Sorted homogeneous Poisson arrivals on ``[t0, t1)`` ticks."""
    if rate <= 0 or t1 <= t0:
        return np.empty(0, dtype=np.int64)
    n = rng.poisson(rate * (t1 - t0) / TICKS_PER_SECOND)
    t = rng.integers(t0, t1, size=n, dtype=np.int64)
    t.sort()
    return t


def _jitter(rng, ticks, sigma_ticks):
    if sigma_ticks <= 0 or ticks.size == 0:
        return ticks
    return ticks + np.rint(rng.normal(0.0, sigma_ticks, ticks.size)).astype(np.int64)


def _apply_dead_time(ticks, dead, last_kept):
    """Non-paralyzable dead time. Returns (kept ticks, new last_kept)."""
    if dead <= 0 or ticks.size == 0:
        return ticks, (int(ticks[-1]) if ticks.size else last_kept)
    keep = np.ones(ticks.size, dtype=bool)
    prev = np.empty(ticks.size, dtype=np.int64)
    prev[0] = last_kept if last_kept is not None else ticks[0] - dead
    prev[1:] = ticks[:-1]
    suspects = np.flatnonzero(ticks - prev < dead)
    ref_dropped = None
    for i in suspects:
        if i == 0:
            ref = last_kept
        else:
            ref = int(ticks[i - 1]) if keep[i - 1] else ref_dropped
        if int(ticks[i]) - ref < dead:
            keep[i] = False
            ref_dropped = ref
    kept = ticks[keep]
    return kept, (int(kept[-1]) if kept.size else last_kept)


def generate_chunks(params, block_seconds: float = BLOCK_SECONDS) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield consecutive ``(ticks1, ticks2)`` pieces covering ``[0, duration)``.

    Concatenating the pieces gives exactly :func:`generate`'s output.  Pieces
    lag generation by one block so partners displaced across a block edge
    land in the right piece.
    """
    if isinstance(params, SourceParams):
        params = PairSourceParams.from_source(params)
    p = params
    end = int(round(p.duration * TICKS_PER_SECOND))
    block = int(round(block_seconds * TICKS_PER_SECOND))
    if block <= 0:
        raise ParameterError("block length must be positive")
    prob = p.pair_probability
    bg2 = p.s2 - p.pair_rate
    sig_ticks = p.jitter_sigma * TICKS_PER_SECOND
    dead = int(round(p.dead_time * TICKS_PER_SECOND))
    scale = p.tau_c / 2 * TICKS_PER_SECOND

    pending1: list[np.ndarray] = []
    pending2: list[np.ndarray] = []
    last = [None, None]

    def emit(limit):
        out = []
        for ch, pend in ((0, pending1), (1, pending2)):
            t = np.concatenate(pend) if pend else np.empty(0, dtype=np.int64)
            t.sort(kind="stable")
            cut = np.searchsorted(t, limit)
            head, tail = t[:cut], t[cut:]
            head = head[head >= 0]
            pend[:] = [tail] if tail.size else []
            head, last[ch] = _apply_dead_time(head, dead, last[ch])
            out.append(head)
        return out[0], out[1]

    nblocks = max(0, -(-end // block))
    for k in range(nblocks):
        t0, t1 = k * block, min((k + 1) * block, end)
        s = p.seed
        prim = _poisson_times(_rng(s, k, _PRIMARY), p.s1, t0, t1)
        partner = np.empty(0, dtype=np.int64)
        if prob > 0 and prim.size:
            sel = prim[_rng(s, k, _PAIR).random(prim.size) < prob]
            delay = _rng(s, k, _DELAY).laplace(0.0, scale, sel.size)
            partner = sel + np.rint(delay).astype(np.int64)
        bg = _poisson_times(_rng(s, k, _BG2), bg2, t0, t1)
        d1 = _poisson_times(_rng(s, k, _DARK1), p.dark1, t0, t1)
        d2 = _poisson_times(_rng(s, k, _DARK2), p.dark2, t0, t1)
        ch1 = np.concatenate((prim, d1))
        ch2 = np.concatenate((partner, bg, d2))
        pending1.append(_jitter(_rng(s, k, _JIT1), ch1, sig_ticks))
        pending2.append(_jitter(_rng(s, k, _JIT2), ch2, sig_ticks))
        if k > 0:
            yield emit(t0)
    # flush: everything before the end of the acquisition
    a, b = emit(end)
    if nblocks:
        yield a, b


def generate(params) -> tuple[EventStream, EventStream]:
    """Two detector streams (channels 1 and 2) for ``params``.

    Accepts :class:`SourceParams` or :class:`PairSourceParams`.
    """
    if isinstance(params, SourceParams):
        params = PairSourceParams.from_source(params)
    parts1, parts2 = [], []
    for a, b in generate_chunks(params):
        parts1.append(a)
        parts2.append(b)
    cat = lambda parts: np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)  # noqa: E731
    return (
        EventStream(cat(parts1), channel=1, duration=params.duration),
        EventStream(cat(parts2), channel=2, duration=params.duration),
    )


def survival_fraction(loss_db: float) -> float:
    return 10.0 ** (loss_db / 10.0)


def attenuate(stream: EventStream, loss_db: float, seed: int = 0, block: int = 0) -> EventStream:
    """Independent Bernoulli thinning with survival ``10**(loss_db/10)``.

    ``block`` separates the random draws of consecutive pieces of one stream.
    """
    if loss_db > 0:
        raise ParameterError(f"loss_db must be <= 0 dB, got {loss_db}")
    if loss_db == 0 or len(stream) == 0:
        return stream
    keep_p = survival_fraction(loss_db)
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream.channel, 0xA7, block]))
    keep = rng.random(len(stream)) < keep_p
    return stream.with_ticks(stream.ticks[keep])

