"""Command-line entry point: ``wcps <subcommand>``.

Every JSON output carries the argument vector that produced it, and
``wcps rerun FILE.json`` replays it.  Failures exit nonzero with a JSON
error object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import socket
import sys
from pathlib import Path

import numpy as np

from . import __version__, presets
from .correlation import fit_g2, g2_normalize, pair_histogram
from .errors import FitError, ParameterError, WcpsError
from .io import ExchangeSession, TimetagWriter, read_timetags, run_initiator, run_responder
from .fftplan import BACKENDS
from .peakfind import FindConfig, FindResult, find_offset
from .peaktrack import Tracker, TrackerConfig, initial_offset, serve_log, track
from .source import PairSourceParams, SourceParams, attenuate, generate_chunks
from .stats import SuccessModelParams, success_probability, success_probability_mc
from .timetag import TICKS_PER_NS, TICKS_PER_SECOND, ClockModel, EventStream

log = logging.getLogger("wcps")

TRUTH_STEP = 0.1  # seconds between ground-truth samples


def _meta(args, argv):
    return {"tool": "wcps", "version": __version__, "argv": list(argv), "seed": getattr(args, "seed", None)}


def _write_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, bytes):
        return v.decode("ascii", "backslashreplace")
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _preset(args, key=None):
    if not getattr(args, "preset", None):
        return {}
    p = presets.get(args.preset)
    return p.get(key, {}) if key else p


def _pick(value, default):
    return default if value is None else value


# -- simulate ------------------------------------------------------------------


def _clocks(args):
    pa = _preset(args, "clock_a")
    pb = _preset(args, "clock_b")

    def ppb(flag, preset, key):
        # flags in ppb, preset values dimensionless
        return flag * 1e-9 if flag is not None else preset.get(key, 0.0) or 0.0

    def ns(flag, preset):
        return int(round(flag * TICKS_PER_NS)) if flag is not None else int(preset.get("offset", 0))

    bound = ppb(args.rw_bound_ppb, pa, "rw_bound")
    a = ClockModel(
        offset=ns(args.offset_ns, pa),
        du0=ppb(args.du_ppb, pa, "du0"),
        drift_rate=ppb(args.drift_ppb_per_s, pa, "drift_rate"),
        rw_step=ppb(args.rw_step_ppb, pa, "rw_step"),
        rw_bound=bound or None,
        seed=args.seed,
    )
    b = ClockModel(offset=ns(args.b_offset_ns, pb), du0=ppb(args.b_du_ppb, pb, "du0"), seed=args.seed + 1)
    return a, b


def _source(args):
    ps = _preset(args, "source")
    sp = SourceParams(
        g2_peak=_pick(args.g2, ps.get("g2_peak", 1.42)),
        tau_c=_pick(args.tau_c_ns, ps.get("tau_c", 180e-9) * 1e9) * 1e-9,
        s1=_pick(args.s1_kcps, ps.get("s1", 192e3) / 1e3) * 1e3,
        s2=_pick(args.s2_kcps, ps.get("s2", 182e3) / 1e3) * 1e3,
        dark1=args.dark_cps,
        dark2=args.dark_cps,
        jitter_sigma=args.jitter_ps * 1e-12,
        dead_time=args.dead_time_ns * 1e-9,
        duration=args.duration,
        seed=args.seed,
    )
    p = PairSourceParams.from_source(sp)
    if args.uncorrelated:
        p = PairSourceParams(p.s1, p.s2, 0.0, p.tau_c, p.duration, p.seed, p.dark1, p.dark2,
                             p.jitter_sigma, p.dead_time)
    return sp, p


def truth_table(clock_a: ClockModel, clock_b: ClockModel, duration: float, step: float = TRUTH_STEP) -> dict:
    """Ground-truth ``tau = t_a - t_b`` and ``du = f_a/f_b - 1`` on a regular grid of true time."""
    n = int(math.floor(duration / step)) + 1
    t = np.arange(n) * step
    ticks = np.rint(t * TICKS_PER_SECOND).astype(np.int64)
    ta = clock_a.local(ticks)
    tb = clock_b.local(ticks)
    du = (1.0 + clock_a.du_at(t)) / (1.0 + clock_b.du_at(t)) - 1.0
    return {"t_true_s": t, "t_a_ps": ta, "t_b_ps": tb, "tau_ps": ta - tb, "du": du}


def cmd_simulate(args, argv):
    sp, p = _source(args)
    clock_a, clock_b = _clocks(args)
    out = Path(args.out or "sim")
    out.mkdir(parents=True, exist_ok=True)
    if args.loss_db > 0:
        raise ParameterError(f"loss must be <= 0 dB, got {args.loss_db}")
    end = int(round(args.duration * TICKS_PER_SECOND))
    if end:
        clock_a.check_span(0, end)
        clock_b.check_span(0, end)
    with TimetagWriter(out / "a.wcpt", 1) as wa, TimetagWriter(out / "b.wcpt", 2) as wb:
        for k, (x, y) in enumerate(generate_chunks(p)):
            x = attenuate(EventStream(x, 1), args.loss_db, args.seed, k).ticks
            y = attenuate(EventStream(y, 2), args.loss_db, args.seed, k).ticks
            wa.write(clock_a.local(x))
            wb.write(clock_b.local(y))
    truth = truth_table(clock_a, clock_b, args.duration)
    side = {
        "meta": _meta(args, argv),
        "source": {"g2_peak": sp.g2_peak, "tau_c_s": sp.tau_c, "s1": p.s1, "s2": p.s2,
                   "pair_rate": p.pair_rate, "loss_db": args.loss_db, "duration_s": args.duration},
        "clock_a": {"offset_ps": clock_a.offset, "du0": clock_a.du0, "drift_rate": clock_a.drift_rate,
                    "rw_step": clock_a.rw_step, "rw_bound": clock_a.rw_bound},
        "clock_b": {"offset_ps": clock_b.offset, "du0": clock_b.du0},
        "counts": {"a": wa.count, "b": wb.count},
        "truth": truth,
    }
    _write_json(side, out / "truth.json")
    _write_json({"a": str(out / "a.wcpt"), "b": str(out / "b.wcpt"), "truth": str(out / "truth.json"),
                 "counts": side["counts"]})
    return 0


# -- g2 ------------------------------------------------------------------------


def _load_alignment(path):
    d = json.loads(Path(path).read_text())
    d = d.get("result", d)
    return FindResult(int(d["tau_ps"]), float(d["du"]), int(d["t_ref_ps"]), [], True)


def cmd_g2(args, argv):
    a = read_timetags(args.file_a)
    b = read_timetags(args.file_b)
    if args.align:
        b = _load_alignment(args.align).align(b)
    pg = _preset(args, "g2")
    dt = int(round(_pick(args.delta_t_ns, pg.get("delta_t", 2e-9) * 1e9) * TICKS_PER_NS))
    max_lag = int(round(_pick(args.max_lag_ns, pg.get("max_lag", 1e-6) * 1e9) * TICKS_PER_NS))
    h = pair_histogram(a, b, dt, max_lag)
    T = h.span / TICKS_PER_SECOND
    if T <= 0 or not len(a) or not len(b):
        raise ParameterError("streams do not overlap in time")
    g2_normalize(h, len(a) / T, len(b) / T, T)
    try:
        fit = fit_g2(h)
        fit_d = fit.to_dict()
    except FitError as exc:
        fit = None
        fit_d = {"error": exc.to_dict()}
    summary = {"meta": _meta(args, argv), "fit": fit_d, "rates": {"a": len(a) / T, "b": len(b) / T},
               "span_s": T, "delta_t_ps": dt}
    if args.out:
        base = Path(args.out)
        with open(base.with_suffix(".csv"), "w") as fh:
            fh.write(f"# {json.dumps(summary['meta'])}\n")
            h.to_csv(fh)
        _write_json(summary, base.with_suffix(".json"))
        if args.plot:
            from .plotting import plot_g2

            summary["figure"] = plot_g2(h, fit, base.with_suffix(".png"))
            _write_json(summary, base.with_suffix(".json"))
    if args.format == "json" or args.out:
        _write_json(summary)
    else:
        sys.stdout.write(h.to_csv())
    return 0


# -- find ----------------------------------------------------------------------


def _find_config(args):
    return FindConfig(
        q=args.q,
        delta_t=int(round(args.delta_t_ns * TICKS_PER_NS)),
        du_range=(-args.du_range_ppb * 1e-9, args.du_range_ppb * 1e-9),
        du_step=args.du_step_ppb * 1e-9,
        target_delta_t=int(round(args.target_delta_t_ns * TICKS_PER_NS)),
        alpha=args.alpha,
        center=int(round(args.center_ns * TICKS_PER_NS)),
        fft=args.fft,
    )


def cmd_find(args, argv):
    a = read_timetags(args.file_a)
    b = read_timetags(args.file_b)
    cfg = _find_config(args)
    res = find_offset(a, b, cfg)
    out = {"meta": _meta(args, argv), "config": cfg.to_dict(), "result": res.to_dict()}
    # flat copies for tools that only want the alignment
    out.update(tau_ps=res.tau, du=res.du, t_ref_ps=res.t_ref)
    _write_json(out, args.out)
    if args.out:
        _write_json({"tau_ps": res.tau, "du": res.du, "accepted": res.accepted, "flagged": res.flagged})
    return 0


# -- track ---------------------------------------------------------------------


def _tracker_config(args, t_start):
    pt = _preset(args, "track")
    pa = _preset(args, "clock_a")
    tau, du = 0, 0.0
    if args.init:
        f = _load_alignment(args.init)
        tau = initial_offset(f.tau, f.du, f.t_ref, t_start)
        du = f.du
    elif args.preset and "du0" in pa:
        du = pa["du0"]
    if args.tau_ns is not None:
        tau = int(round(args.tau_ns * TICKS_PER_NS))
    if args.du_ppb is not None:
        du = args.du_ppb * 1e-9
    return TrackerConfig(
        beta=_pick(args.beta_ms, pt.get("beta", 50e-3) * 1e3) * 1e-3,
        window=int(round(_pick(args.window_ns, pt.get("window", 256e-9) * 1e9) * TICKS_PER_NS)),
        freq_window=args.freq_window,
        initial_tau=tau,
        initial_du=du,
        compensate=not args.no_compensate,
        recover=args.recover,
    )


def track_summary(samples, truth=None, lost=None):
    """RMS jitter and, with a ground-truth table, the served timing and frequency errors."""
    t = np.array([s.t for s in samples], dtype=float)
    tau = np.array([s.tau for s in samples], dtype=float)
    du = np.array([s.du for s in samples], dtype=float)
    out = {"samples": len(samples), "lost": lost or []}
    if len(samples) >= 3:
        coef = np.polyfit(t, tau, 1)
        out["jitter_rms_ns"] = float(np.sqrt(np.mean((tau - np.polyval(coef, t)) ** 2)) / TICKS_PER_NS)
    if truth is not None and len(samples):
        ta = np.asarray(truth["t_a_ps"], dtype=float)
        true_tau = np.interp(t, ta, np.asarray(truth["tau_ps"], dtype=float))
        err = (tau - true_tau) / TICKS_PER_NS
        out["rms_error_ns"] = float(np.sqrt(np.mean(err**2)))
        out["mean_error_ns"] = float(np.mean(err))
        true_du = np.interp(t, ta, np.asarray(truth["du"], dtype=float))
        e = (du - true_du) * 1e9
        out["du_rms_error_ppb"] = float(np.sqrt(np.mean(e**2)))
        # ten-second mean of the true frequency offset, from the true offset drift
        back = np.interp(t - 10 * TICKS_PER_SECOND, ta, np.asarray(truth["tau_ps"], dtype=float))
        ok = t - 10 * TICKS_PER_SECOND >= ta[0]
        if np.any(ok):
            du10 = (true_tau - back) / (10 * TICKS_PER_SECOND)
            e10 = (du - du10)[ok] * 1e9
            out["du_rms_error_10s_ppb"] = float(np.sqrt(np.mean(e10**2)))
    return out


def _emit_track(args, argv, samples, cfg, lost, reasons):
    truth = json.loads(Path(args.truth).read_text())["truth"] if args.truth else None
    summary = {"meta": _meta(args, argv), "config": cfg.to_dict(),
               "summary": track_summary(samples, truth, lost), "lost_reasons": reasons}
    if args.out:
        base = Path(args.out)
        with open(base.with_suffix(".csv"), "w") as fh:
            fh.write(f"# {json.dumps(summary['meta'])}\n")
            serve_log(samples, fh)
        if args.plot and samples:
            from .plotting import plot_track

            tt = None
            if truth is not None:
                t = np.array([s.t for s in samples], dtype=float)
                tt = np.interp(t, np.asarray(truth["t_a_ps"], float), np.asarray(truth["tau_ps"], float))
            summary["figure"] = plot_track(samples, base.with_suffix(".png"), tt)
        _write_json(summary, base.with_suffix(".json"))
        _write_json(summary)
    elif args.format == "json":
        _write_json(summary)
    else:
        serve_log(samples, sys.stdout)
        sys.stderr.write(json.dumps(summary["summary"], default=_jsonable) + "\n")
    if lost and not args.recover:
        sys.stderr.write(json.dumps({"error": "tracking_lost", "lost_at_ps": lost[0],
                                     "message": reasons[0] if reasons else ""}, default=_jsonable) + "\n")
        return 3
    return 0


def cmd_track(args, argv):
    a = read_timetags(args.file_a)
    t_start = int(a.ticks[0]) if len(a) else 0
    cfg = _tracker_config(args, t_start)
    if args.listen is not None:
        host, port = _hostport(args.listen, "127.0.0.1")
        with socket.create_server((host, port)) as srv:
            srv.settimeout(args.peer_timeout * 12)
            conn, _ = srv.accept()
        session = ExchangeSession("initiator", conn, peer_timeout=args.peer_timeout)
        try:
            tr = run_initiator(session, a, Tracker(cfg))
        finally:
            session.close()
        lost = [tr.lost_at] if tr.lost else []
        return _emit_track(args, argv, tr.samples, cfg, lost, [tr.lost_reason] if tr.lost else [])
    if args.file_b is None:
        raise ParameterError("track needs a second timetag file or --listen")
    b = read_timetags(args.file_b)
    res = track(a, b, cfg)
    return _emit_track(args, argv, res.samples, cfg, res.lost_at, res.reasons)


def _hostport(text, default_host):
    if ":" in str(text):
        h, p = str(text).rsplit(":", 1)
        return h or default_host, int(p)
    return default_host, int(text)


def cmd_peer(args, argv):
    b = read_timetags(args.file)
    host, port = _hostport(args.connect, "127.0.0.1")
    sock = socket.create_connection((host, port), timeout=args.peer_timeout)
    sock.settimeout(None)
    session = ExchangeSession("responder", sock, peer_timeout=args.peer_timeout)
    try:
        _, served = run_responder(session, b, batch=args.batch, cadence=args.cadence_ms * 1e-3)
    finally:
        session.close()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["tau_ps", "du"])
    for tau, du in served:
        w.writerow([tau, repr(du)])
    return 0


# -- surface -------------------------------------------------------------------


def surface_rows(model: dict, qs, dts, trials: int, seed: int, normal: bool = False, tau_c=None):
    rows = []
    for q in qs:
        for dt in dts:
            p = SuccessModelParams(q=int(q), delta_t=dt, tau_c=tau_c, **model)
            row = {"q": int(q), "delta_t_ps": int(round(dt * TICKS_PER_SECOND)),
                   "prob": success_probability(p, "auto")}
            if trials:
                mc = success_probability_mc(p, trials, seed=seed)
                row.update(prob_mc=mc.p, ci_low=mc.ci_low, ci_high=mc.ci_high)
            else:
                row.update(prob_mc="", ci_low="", ci_high="")
            if normal:
                row["prob_normal"] = success_probability(p, "normal")
            rows.append(row)
    return rows


def cmd_surface(args, argv):
    pre = _preset(args)
    m = dict(pre.get("model", {"s1": 100e3, "s2": 100e3, "c": 650.0, "nu": 0.5, "du": 50e-9}))
    if args.s1_kcps is not None:
        m["s1"] = args.s1_kcps * 1e3
    if args.s2_kcps is not None:
        m["s2"] = args.s2_kcps * 1e3
    if args.c_cps is not None:
        m["c"] = args.c_cps
    if args.nu is not None:
        m["nu"] = args.nu
    if args.du_ppb is not None:
        m["du"] = args.du_ppb * 1e-9
    qs = args.q or pre.get("q", [16, 19, 22, 25, 28])
    dts = [v * 1e-9 for v in args.delta_t_ns] if args.delta_t_ns else pre.get("delta_t", [64e-9, 256e-9, 1024e-9])
    trials = _pick(args.trials, pre.get("trials", 100_000))
    normal = args.normal or pre.get("normal", False)
    tau_c = None if args.tau_c_ns is None else args.tau_c_ns * 1e-9
    rows = surface_rows(m, qs, dts, trials, args.seed, normal, tau_c)
    cols = ["q", "delta_t_ps", "prob", "prob_mc", "ci_low", "ci_high"] + (["prob_normal"] if normal else [])
    meta = _meta(args, argv)
    if args.format == "json":
        text = json.dumps({"meta": meta, "model": m, "rows": rows}, indent=2, default=_jsonable) + "\n"
    else:
        import io as _io

        buf = _io.StringIO()
        buf.write(f"# {json.dumps(meta)}\n")
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
        if args.plot:
            from .plotting import plot_surface

            plot_surface(rows, Path(args.out).with_suffix(".png"))
            if normal:
                plot_surface(rows, Path(args.out).with_name(Path(args.out).stem + "_normal.png"), "prob_normal")
    else:
        sys.stdout.write(text)
    return 0


def cmd_rerun(args, argv):
    d = json.loads(Path(args.file).read_text())
    meta = d.get("meta", d)
    old = meta.get("argv")
    if not old:
        raise ParameterError(f"{args.file} carries no argument vector")
    return main(old)


# -- parser --------------------------------------------------------------------


def _common(p, duration=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output path: a directory for simulate, a base name for g2 and track, a file otherwise")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--preset", choices=sorted(presets.PRESETS), default=None)
    p.add_argument("--plot", action="store_true", help="also render a PNG next to --out")
    if duration:
        p.add_argument("--duration", type=float, default=presets.DESK_DURATION, help="seconds")


def build_parser():
    ap = argparse.ArgumentParser(prog="wcps", description="Clock synchronization from correlated photon timestamps.")
    ap.add_argument("--version", action="version", version=f"wcps {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="write two timetag files and a ground-truth sidecar")
    _common(p)
    p.add_argument("--s1-kcps", type=float)
    p.add_argument("--s2-kcps", type=float)
    p.add_argument("--g2", type=float)
    p.add_argument("--tau-c-ns", type=float)
    p.add_argument("--loss-db", type=float, default=0.0, help="per channel, <= 0")
    p.add_argument("--dark-cps", type=float, default=0.0)
    p.add_argument("--jitter-ps", type=float, default=20.0)
    p.add_argument("--dead-time-ns", type=float, default=0.0)
    p.add_argument("--du-ppb", type=float, help="clock A frequency offset")
    p.add_argument("--offset-ns", type=float, help="clock A offset")
    p.add_argument("--drift-ppb-per-s", type=float)
    p.add_argument("--rw-step-ppb", type=float)
    p.add_argument("--rw-bound-ppb", type=float)
    p.add_argument("--b-du-ppb", type=float)
    p.add_argument("--b-offset-ns", type=float)
    p.add_argument("--uncorrelated", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("g2", help="coincidence histogram and coherence fit")
    _common(p, duration=False)
    p.add_argument("file_a")
    p.add_argument("file_b")
    p.add_argument("--delta-t-ns", type=float)
    p.add_argument("--max-lag-ns", type=float)
    p.add_argument("--align", help="find result JSON used to map b onto a")
    p.set_defaults(func=cmd_g2)

    p = sub.add_parser("find", help="coarse sweep and refinement of the time and frequency offset")
    _common(p, duration=False)
    p.add_argument("file_a")
    p.add_argument("file_b")
    p.add_argument("--q", type=int, default=20)
    p.add_argument("--delta-t-ns", type=float, default=1024.0)
    p.add_argument("--du-range-ppb", type=float, default=10_000.0)
    p.add_argument("--du-step-ppb", type=float, default=100.0)
    p.add_argument("--target-delta-t-ns", type=float, default=256.0)
    p.add_argument("--center-ns", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--fft", choices=BACKENDS, default="scipy",
                   help="backend for the sweep ranking; fftw plans for tens of seconds first")
    p.set_defaults(func=cmd_find)

    p = sub.add_parser("track", help="follow the offset with the moving-average tracker")
    _common(p, duration=False)
    p.add_argument("file_a")
    p.add_argument("file_b", nargs="?")
    p.add_argument("--init", help="find result JSON with the starting alignment")
    p.add_argument("--tau-ns", type=float)
    p.add_argument("--du-ppb", type=float)
    p.add_argument("--beta-ms", type=float)
    p.add_argument("--window-ns", type=float)
    p.add_argument("--freq-window", type=int, default=20, help="serve intervals per frequency fit")
    p.add_argument("--no-compensate", action="store_true")
    p.add_argument("--recover", action="store_true")
    p.add_argument("--truth", help="simulate sidecar for error statistics")
    p.add_argument("--listen", help="[host:]port; receive the peer's stream instead of file_b")
    p.add_argument("--peer-timeout", type=float, default=5.0)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("peer", help="stream a timetag file to a listening tracker")
    p.add_argument("file")
    p.add_argument("--connect", required=True, help="[host:]port")
    p.add_argument("--batch", type=int, default=4096)
    p.add_argument("--cadence-ms", type=float, default=0.0)
    p.add_argument("--peer-timeout", type=float, default=5.0)
    p.set_defaults(func=cmd_peer)

    p = sub.add_parser("surface", help="peak-finding success probability over (q, delta_t)")
    _common(p, duration=False)
    p.add_argument("--q", type=int, nargs="+")
    p.add_argument("--delta-t-ns", type=float, nargs="+")
    p.add_argument("--trials", type=int)
    p.add_argument("--s1-kcps", type=float)
    p.add_argument("--s2-kcps", type=float)
    p.add_argument("--c-cps", type=float)
    p.add_argument("--nu", type=float)
    p.add_argument("--du-ppb", type=float)
    p.add_argument("--tau-c-ns", type=float, help="apply the finite-bin capture factor")
    p.add_argument("--normal", action="store_true", help="add the normal-approximation column")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("rerun", help="repeat the run recorded in a JSON output")
    p.add_argument("file")
    p.set_defaults(func=cmd_rerun)
    return ap


def _setup_logging():
    level = os.environ.get("WCPS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(kind, message, code=1):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            return _fail("usage", "invalid arguments (see --help)", 2)
        return 0
    try:
        return args.func(args, argv)
    except WcpsError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), default=_jsonable) + "\n")
        return 2
    except (OSError, KeyError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
