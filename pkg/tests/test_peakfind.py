import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wcps.correlation import GridParams, bin_events
from wcps.errors import DataError, EstimationError, NotFoundError, ParameterError
from wcps.peakfind import (
    FindConfig,
    FindResult,
    estimate_du,
    find_offset,
    find_once,
    refine,
    sweep_grid,
    sweep_precompensation,
    threshold_for,
)
from wcps.source import SourceParams, generate
from wcps.stats import max_order_quantile
from wcps.timetag import TICKS_PER_NS, TICKS_PER_SECOND, ClockModel, apply_clock


def poisson_stream(rng, rate, duration):
    n = rng.poisson(rate * duration)
    return np.sort(rng.integers(0, int(duration * TICKS_PER_SECOND), n))


def test_identical_streams_peak_at_zero():
    rng = np.random.default_rng(0)
    a = poisson_stream(rng, 1e5, 0.1)
    g = GridParams(14, 4096 * TICKS_PER_NS, int(a[0]))
    c = find_once(a, a, g)
    assert c.accepted and c.lag == 0 and c.tau == 0
    # zero lag of an autocorrelation is the sum of squared occupancies
    assert c.peak_counts == int(np.sum(bin_events(a[a < a[0] + g.span], g) ** 2))
    assert c.peak_counts >= math.ceil(c.noise_mean)


def test_constructed_shift_is_recovered():
    rng = np.random.default_rng(1)
    a = poisson_stream(rng, 1e5, 0.3)
    shift = 37 * 1000 * TICKS_PER_NS
    b = a + shift  # tau = t_a - t_b = -37 us
    g = GridParams(16, 1024 * TICKS_PER_NS, int(a[0]))
    c = find_once(a, b, g)
    assert c.accepted
    assert abs(c.tau - (-shift)) <= g.delta_t


def test_find_once_requires_span():
    a = np.arange(0, 10**9, 10**6)
    with pytest.raises(DataError):
        find_once(a, a, GridParams(20, 1024 * TICKS_PER_NS))


def test_threshold_is_max_order_quantile():
    lam, bins, alpha = 3.0, 1 << 12, 1e-3
    x = max_order_quantile(lam, bins, alpha)
    assert threshold_for(lam, bins, alpha) >= (x - lam) / math.sqrt(lam)


def test_uncorrelated_streams_rarely_accepted():
    rng = np.random.default_rng(2)
    g = GridParams(10, 1000 * TICKS_PER_NS)
    dur = 1.01 * g.span_seconds
    trials, accepted = 3000, 0
    for _ in range(trials):
        a = poisson_stream(rng, 4e6, dur)
        b = poisson_stream(rng, 4e6, dur)
        accepted += find_once(a, b, g).accepted
    # false-accept target 1e-3: at most 3 expected, allow a 3 sigma excursion
    assert accepted <= 3 + 3 * math.sqrt(3)


def test_rejection_reports_statistics():
    rng = np.random.default_rng(3)
    g = GridParams(10, 1000 * TICKS_PER_NS)
    a = poisson_stream(rng, 4e6, 1.01 * g.span_seconds)
    b = poisson_stream(rng, 4e6, 1.01 * g.span_seconds)
    c = find_once(a, b, g)
    assert not c.accepted
    assert "below threshold" in c.reason
    assert c.noise_mean > 0 and c.noise_std > 0


def test_sweep_grid_examples():
    vals, degen = sweep_grid((-1e-6, 1e-6), 100e-9)
    assert vals.size == 21 and not degen
    assert np.any(np.abs(vals) < 1e-15)
    vals, degen = sweep_grid((-1e-7, 1e-7), 1e-6)
    assert vals.tolist() == [0.0] and degen
    with pytest.raises(ParameterError):
        sweep_grid((-1e-6, 1e-6), 0.0)


def _dense_identical(seed=4):
    # every event of a has a partner at the same instant in b
    rng = np.random.default_rng(seed)
    return poisson_stream(rng, 1e8, 1.2e-3)


def test_sweep_with_zero_offset_picks_zero():
    a = _dense_identical()
    g = GridParams(20, TICKS_PER_NS, int(a[0]))
    r = sweep_precompensation(a, a, g, (-1e-6, 1e-6), 100e-9)
    assert r.du == 0.0 and r.evaluated == 21 and not r.degenerate
    assert r.candidate.tau == 0


def test_degenerate_sweep_is_flagged():
    a = _dense_identical()
    g = GridParams(20, TICKS_PER_NS, int(a[0]))
    r = sweep_precompensation(a, a, g, (-1e-8, 1e-8), 1e-6)
    assert r.degenerate and r.evaluated == 1


def test_sweep_failure_carries_best_candidate():
    rng = np.random.default_rng(5)
    g = GridParams(10, 1000 * TICKS_PER_NS)
    a = poisson_stream(rng, 4e6, 1.01 * g.span_seconds)
    b = poisson_stream(rng, 4e6, 1.01 * g.span_seconds)
    with pytest.raises(NotFoundError) as exc:
        sweep_precompensation(a, b, g, (-1e-6, 1e-6), 1e-6)
    assert exc.value.best is not None and not exc.value.best.accepted


def test_sweep_recovers_injected_4ppm():
    a, b = generate(SourceParams(duration=2, seed=0))
    a = apply_clock(a, ClockModel(du0=4e-6))
    g = GridParams(20, 1024 * TICKS_PER_NS, int(a.ticks[0]))
    r = sweep_precompensation(a, b, g, (-10e-6, 10e-6), 100e-9)
    assert abs(r.du - 4e-6) <= 50e-9


def test_estimate_du_constant_offset():
    # two short bursts 100 s apart, drifting by 1 us: du = 10 ppb
    rng = np.random.default_rng(6)
    seg = GridParams(12, 100 * TICKS_PER_NS)
    early = poisson_stream(rng, 5e7, seg.span_seconds)
    late = early + 100 * TICKS_PER_SECOND - seg.span
    a = np.concatenate([early, late])
    b = np.concatenate([early, late + 1000 * TICKS_PER_NS])
    r = estimate_du(b, a, 0, seg.span, grid=seg, start=0, stop=100 * TICKS_PER_SECOND)
    assert r.tau_late - r.tau_early == 1000 * TICKS_PER_NS
    assert r.du == pytest.approx(1e-6 / (100 - seg.span_seconds), rel=1e-12)


def test_estimate_du_zero_within_bin_over_span():
    rng = np.random.default_rng(7)
    a = poisson_stream(rng, 2e6, 0.2)
    seg = GridParams(14, 1024 * TICKS_PER_NS)
    r = estimate_du(a, a, 0, seg.span, grid=seg)
    assert abs(r.du) <= seg.delta_t / (0.2 * TICKS_PER_SECOND)


def test_estimate_du_errors():
    rng = np.random.default_rng(8)
    a = poisson_stream(rng, 2e6, 0.01)
    seg = GridParams(14, 1024 * TICKS_PER_NS)
    with pytest.raises(EstimationError):
        estimate_du(a, a, 0, seg.span, grid=seg)
    b = poisson_stream(rng, 2e6, 0.2)
    c = poisson_stream(rng, 2e6, 0.2)
    with pytest.raises(EstimationError):
        estimate_du(b, c, 0, seg.span, grid=seg)
    with pytest.raises(ParameterError):
        estimate_du(b, c, 0, 1000)


def test_estimate_du_random_walk_clock():
    clock = ClockModel(rw_step=3.3e-9, du0=20e-9, seed=2)
    p = SourceParams(duration=60, seed=9)
    a, b = generate(p)
    a = apply_clock(a, clock)
    seg = GridParams(20, 256 * TICKS_PER_NS)
    r = estimate_du(a, b, 0, seg.span, grid=seg, start=0, stop=60 * TICKS_PER_SECOND)
    t = np.array([r.center_early, r.center_late])
    true_phase = clock.local(t) - t
    truth = (true_phase[1] - true_phase[0]) / (t[1] - t[0])
    assert abs(r.du - truth) <= 2 * r.uncertainty


def test_refine_noop_when_target_is_coarser():
    g = GridParams(10, 1000)
    from wcps.peakfind import PeakCandidate

    c = PeakCandidate(0, 0, 1, 0.0, 0.0, 0, 1.0, 1.0, True, "accepted", g)
    init = FindResult(0, 0.0, 0, [c], True)
    assert refine([0], [0], init, 1000) is init
    with pytest.raises(ParameterError):
        refine([0], [0], FindResult(0, 0.0, 0, [c], False), 10)


def test_refine_noiseless_shift_is_exact():
    rng = np.random.default_rng(10)
    a = poisson_stream(rng, 2e6, 0.4)
    shift = 123_456_789
    b = a - shift
    cfg = FindConfig(q=14, delta_t=4096 * TICKS_PER_NS, du_range=(0, 0), du_step=1e-7,
                     target_delta_t=4 * TICKS_PER_NS)
    r = find_offset(a, b, cfg)
    assert r.accepted and not r.flagged
    assert r.delta_t == 4 * TICKS_PER_NS
    assert abs(r.tau - shift) <= r.delta_t


def test_refine_error_never_grows():
    rng = np.random.default_rng(13)
    a = poisson_stream(rng, 2e6, 0.4)
    shift = 98_765_432
    b = a - shift
    cfg = FindConfig(q=14, delta_t=4096 * TICKS_PER_NS, du_range=(0, 0), du_step=1e-7,
                     target_delta_t=4096 * TICKS_PER_NS)
    init = find_offset(a, b, cfg)
    errs = [abs(init.tau - shift)]
    for k in range(1, 11):
        r = refine(a, b, init, (4096 >> k) * TICKS_PER_NS)
        assert not r.flagged
        errs.append(abs(r.tau - shift))
    assert all(e1 <= e0 for e0, e1 in zip(errs, errs[1:])), errs


def test_refine_reports_divergence():
    rng = np.random.default_rng(11)
    a = poisson_stream(rng, 2e6, 0.4)
    b = a - 5_000_000
    cfg = FindConfig(q=14, delta_t=4096 * TICKS_PER_NS, du_range=(0, 0), du_step=1e-7,
                     target_delta_t=4 * TICKS_PER_NS)
    r = find_offset(a, b, cfg)
    # the peak is confined to a single bin only above the last level; jitter
    # b so that fine levels lose it
    jitter = rng.normal(0, 200 * TICKS_PER_NS, a.size).astype(np.int64)
    b2 = np.sort(a - 5_000_000 + jitter)
    r2 = refine(a, b2, FindResult(r.levels[0].tau, 0.0, int(a[0]), [r.levels[0]], True),
                TICKS_PER_NS)
    assert r2.flagged and "refinement stopped" in r2.reason
    assert abs(r2.tau - 5_000_000) <= 4096 * TICKS_PER_NS


def test_find_offset_section_scale_simulation():
    clock = ClockModel(offset=-37_000_000_000, du0=4e-6)
    p = SourceParams(duration=10, seed=12)
    a, b = generate(p)
    a = apply_clock(a, clock)
    r = find_offset(a, b, FindConfig())
    true_tau = int(clock.local(np.array([r.t_ref]))[0]) - r.t_ref
    assert r.accepted and r.delta_t == 256 * TICKS_PER_NS
    assert abs(r.tau - true_tau) <= 2 * p.tau_c * TICKS_PER_SECOND
    assert abs(r.du - 4e-6) <= 100e-9
    d = r.to_dict()
    assert d["tau_ps"] == r.tau and d["accepted"] and len(d["levels"]) == len(r.levels)


def test_find_offset_empty_stream():
    with pytest.raises(DataError):
        find_offset([], [1, 2, 3])


@settings(max_examples=15, deadline=None)
@given(st.integers(-2000, 2000), st.integers(0, 2**32 - 1))
def test_translation_equivariance(shift_bins, seed):
    rng = np.random.default_rng(seed)
    g = GridParams(12, 1000 * TICKS_PER_NS)
    a = poisson_stream(rng, 3e6, 3 * g.span_seconds) + g.span
    g = g.with_origin(g.span)
    base = find_once(a, a, g)
    shift = shift_bins * g.delta_t + int(rng.integers(0, g.delta_t // 4))
    moved = find_once(a, a - shift, g)
    assert base.accepted and moved.accepted
    assert moved.tau - base.tau == pytest.approx(shift, abs=g.delta_t)
