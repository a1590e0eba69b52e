"""Kernel backend selection.

The heavy inner loops (convolution patch gather/scatter, codebook
nearest-neighbor search) exist twice: numba @njit kernels and pure-numpy
fallbacks with identical layouts.  Selection happens once, at first use:

  IDFCR_NUMBA=1   force numba (raises if numba cannot be imported)
  IDFCR_NUMBA=0   force the pure-numpy fallback
  unset           use numba when importable, else fall back silently

``benchmarks/bench_kernels.py`` times both paths side by side.
"""

import os

from . import _kernels_numpy
from .errors import ConfigError

_impl = None
_impl_name = None


def _reset():
    """Drop the cached choice so the next call re-reads the environment."""
    global _impl, _impl_name
    _impl = None
    _impl_name = None


def _resolve():
    global _impl, _impl_name
    if _impl is not None:
        return _impl
    flag = os.environ.get("IDFCR_NUMBA", "").strip().lower()
    if flag not in ("", "0", "false", "off", "1", "true", "on"):
        raise ConfigError(f"IDFCR_NUMBA must be 0/1 (got {flag!r})")
    if flag in ("0", "false", "off"):
        _impl, _impl_name = _kernels_numpy, "numpy"
        return _impl
    try:
        from . import _kernels_numba
    except ImportError:
        if flag in ("1", "true", "on"):
            raise ConfigError("IDFCR_NUMBA=1 but numba is not importable")
        _impl, _impl_name = _kernels_numpy, "numpy"
        return _impl
    _impl, _impl_name = _kernels_numba, "numba"
    return _impl


def backend_name() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    _resolve()
    return _impl_name


def im2col(x, kh, kw, stride, pad):
    return _resolve().im2col(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _resolve().col2im(cols, tuple(int(s) for s in x_shape), kh, kw, stride, pad)


def nearest_codebook(sites, entries):
    return _resolve().nearest_codebook(sites, entries)
