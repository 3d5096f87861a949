"""Named parameter sets for the reference experiments.

Durations are desk-scale (60 s by default) and can be overridden.
"""

from __future__ import annotations

import copy

DESK_DURATION = 60.0

PRESETS = {
    # bunched light at the two receivers
    "paper-fig1": {
        "source": {"g2_peak": 1.42, "tau_c": 180e-9, "s1": 192e3, "s2": 182e3},
        "clock_a": {"du0": 0.0},
        "clock_b": {},
        "g2": {"delta_t": 2e-9, "max_lag": 1e-6},
    },
    # peak finding surface, 3 dB extra loss per channel
    "paper-fig3": {
        "model": {"s1": 100e3, "s2": 100e3, "c": 650.0, "nu": 0.5, "du": 50e-9},
        "q": [16, 19, 22, 25, 28],
        "delta_t": [64e-9, 128e-9, 256e-9, 512e-9, 1024e-9],
        "trials": 100_000,
    },
    # tracking with a constant frequency offset
    "paper-fig4": {
        "source": {"g2_peak": 1.42, "tau_c": 180e-9, "s1": 200e3, "s2": 200e3},
        "clock_a": {"du0": 10e-9},
        "clock_b": {},
        "track": {"beta": 50e-3, "window": 256e-9},
        "betas": [1e-3, 2e-3, 5e-3, 10e-3, 50e-3, 200e-3, 1.0],
    },
    # same surface with the normal-approximation column
    "paper-fig5": {
        "model": {"s1": 100e3, "s2": 100e3, "c": 650.0, "nu": 0.5, "du": 50e-9},
        "q": [16, 19, 22, 25, 28],
        "delta_t": [64e-9, 128e-9, 256e-9, 512e-9, 1024e-9],
        "trials": 100_000,
        "normal": True,
    },
    # frequency reconstruction on a drifting clock
    "paper-fig2": {
        "source": {"g2_peak": 1.42, "tau_c": 180e-9, "s1": 200e3, "s2": 200e3},
        "clock_a": {"rw_step": 3.3e-9, "rw_bound": 35.4e-9},
        "clock_b": {},
        "track": {"beta": 50e-3, "window": 256e-9},
    },
    # the initial frequency correction case for peak finding
    "find-4ppm": {
        "source": {"g2_peak": 1.42, "tau_c": 180e-9, "s1": 192e3, "s2": 182e3},
        "clock_a": {"du0": 4.0e-6},
        "clock_b": {},
    },
}


def get(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None
