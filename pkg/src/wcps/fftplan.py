"""Single-precision circular cross-correlation used to rank sweep trials.

Two backends: ``"scipy"`` (default, no planning cost) and ``"fftw"``, which
builds measured FFTW plans through pyfftw.  Measuring takes tens of seconds
per transform size, so it only pays off when many sweeps run in one process.
Measured plans are picked by timing, so the low bits of the result can
differ between processes.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sfft

from .errors import ParameterError

BACKENDS = ("scipy", "fftw")
_plans: dict = {}


class _ScipyXcorr:
    def __init__(self, n):
        self.n = n

    def spectrum(self, trace):
        return sfft.rfft(np.asarray(trace, dtype=np.float32))

    def __call__(self, fa, counts):
        fb = sfft.rfft(counts.astype(np.float32))
        np.conjugate(fb, out=fb)
        fb *= fa
        return sfft.irfft(fb, n=self.n)


class _FFTWXcorr:
    def __init__(self, n, effort="FFTW_MEASURE"):
        import pyfftw

        self.n = n
        self._x = pyfftw.empty_aligned(n, dtype=np.float32)
        self._f = pyfftw.empty_aligned(n // 2 + 1, dtype=np.complex64)
        self._r = pyfftw.empty_aligned(n, dtype=np.float32)
        self._fwd = pyfftw.FFTW(self._x, self._f, flags=(effort,), threads=1)
        self._bwd = pyfftw.FFTW(self._f, self._r, direction="FFTW_BACKWARD",
                                flags=(effort, "FFTW_DESTROY_INPUT"), threads=1)

    def spectrum(self, trace):
        np.copyto(self._x, trace, casting="unsafe")
        self._fwd()
        return self._f.copy()

    def __call__(self, fa, counts):
        np.copyto(self._x, counts, casting="unsafe")
        self._fwd()
        np.conjugate(self._f, out=self._f)
        self._f *= fa
        # calling the plan object applies the 1/n of the inverse
        self._bwd()
        # the buffer is reused by the next call
        return self._r


def xcorr32(n: int, backend: str = "scipy"):
    """Callable pair for length-``n`` correlation: ``.spectrum(trace_a)`` then ``(fa, counts_b)``.

    ``(fa, counts_b)[k]`` is ``sum_i a[i + k] * b[i]`` (indices mod ``n``).
    """
    if backend not in BACKENDS:
        raise ParameterError(f"unknown FFT backend {backend!r}; choose from {BACKENDS}")
    if backend == "scipy":
        return _ScipyXcorr(n)
    key = (backend, n)
    if key not in _plans:
        try:
            _plans[key] = _FFTWXcorr(n)
        except ImportError as exc:
            raise ParameterError("the fftw backend needs pyfftw (pip install 'wcps[fftw]')") from exc
    return _plans[key]
