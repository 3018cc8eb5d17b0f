"""Numba switch.

Set ``MJLSPO_DISABLE_NUMBA=1`` to force the pure-numpy kernels. If numba is
not importable the numpy kernels are used regardless.
"""
import os
import warnings

DISABLE_ENV = "MJLSPO_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get(DISABLE_ENV, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()

if not HAVE_NUMBA and not _env_disabled():  # pragma: no cover
    warnings.warn("numba could not be imported; using numpy kernels")


def njit(func):
    """``numba.njit(cache=True)`` when numba is installed, identity otherwise.

    Compilation is lazy, so decorating costs nothing when the numpy backend is
    selected.
    """
    if HAVE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
