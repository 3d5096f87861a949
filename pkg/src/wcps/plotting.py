"""Figure rendering for CLI reports.  Files only, never an interactive window."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .timetag import TICKS_PER_NS, TICKS_PER_SECOND  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_g2(hist, fit, path):
    h = hist.ordered()
    t = h.tau / TICKS_PER_NS
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.errorbar(t, h.normalized, yerr=h.errors, fmt=".", ms=2, lw=0.5, color="0.3", label="measured")
    if fit is not None and not fit.degenerate:
        tt = np.linspace(t.min(), t.max(), 2000)
        model = 1 + fit.amplitude * np.exp(-2 * np.abs(tt - fit.tau0 * 1e9) / (fit.tau_c * 1e9))
        ax.plot(tt, model, color="C3", lw=1.2,
                label=f"fit: g2(0)={fit.g2_0:.3f}, tau_c={fit.tau_c * 1e9:.1f} ns")
    ax.set_xlabel("time delay (ns)")
    ax.set_ylabel("g2")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_track(samples, path, truth=None):
    """Served offset (and error against ``truth`` in ticks, if given) over time."""
    t = np.array([s.t for s in samples], dtype=float) / TICKS_PER_SECOND
    tau = np.array([s.tau for s in samples], dtype=float)
    du = np.array([s.du for s in samples], dtype=float)
    rows = 3 if truth is not None else 2
    fig, axes = plt.subplots(rows, 1, sharex=True, figsize=(6, 2.2 * rows))
    axes[0].plot(t, tau / TICKS_PER_NS, lw=0.8)
    axes[0].set_ylabel("tau (ns)")
    axes[1].plot(t, du * 1e9, lw=0.8, color="C1")
    axes[1].set_ylabel("du (ppb)")
    if truth is not None:
        err = (tau - np.asarray(truth, dtype=float)) / TICKS_PER_NS
        axes[2].plot(t, err, lw=0.6, color="C2")
        axes[2].axhline(0, color="0.5", lw=0.5)
        axes[2].set_ylabel("error (ns)")
    axes[-1].set_xlabel("time (s)")
    return _save(fig, path)


def plot_surface(rows, path, column="prob"):
    """Heat map of success probability over (q, delta_t)."""
    qs = sorted({r["q"] for r in rows})
    dts = sorted({r["delta_t_ps"] for r in rows})
    grid = np.full((len(qs), len(dts)), np.nan)
    for r in rows:
        grid[qs.index(r["q"]), dts.index(r["delta_t_ps"])] = r[column]
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(grid, origin="lower", aspect="auto", vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(dts)), [f"{d / TICKS_PER_NS:g}" for d in dts])
    ax.set_yticks(range(len(qs)), [str(q) for q in qs])
    ax.set_xlabel("time bin width (ns)")
    ax.set_ylabel("log2 N")
    fig.colorbar(im, ax=ax, label=column)
    return _save(fig, path)
