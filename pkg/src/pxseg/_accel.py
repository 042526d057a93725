"""Backend selection for the hot kernels.

Kernels are written twice: a numba ``@njit`` loop version and a vectorised
numpy version.  ``PXSEG_BACKEND=numpy`` forces the fallback; the default is
``numba`` when it imports cleanly.
"""
import os

try:
    import numba
    from numba import njit as _njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _want_numba():
    flag = os.environ.get("PXSEG_BACKEND", "numba").strip().lower()
    if flag not in ("numba", "numpy"):
        raise ValueError(f"PXSEG_BACKEND must be 'numba' or 'numpy', got {flag!r}")
    return flag == "numba" and HAVE_NUMBA


USE_NUMBA = _want_numba()
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or a no-op decorator without numba."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)


def pick(numba_impl, numpy_impl):
    """Return the implementation matching the active backend."""
    return numba_impl if USE_NUMBA else numpy_impl
