"""Backend selection for the hot numeric kernels.

Every kernel in :mod:`kklearn._kernels` exists twice: a numba-compiled loop
version and a vectorised numpy version.  The numba path is used when numba is
importable and ``KKLEARN_NUMBA`` is not set to a false-ish value
(``0``, ``false``, ``no``, ``off``).  Both paths are always importable so that
they can be compared against each other.
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None

_FALSY = {"0", "false", "no", "off"}

HAVE_NUMBA = numba is not None


def numba_requested() -> bool:
    return os.environ.get("KKLEARN_NUMBA", "1").strip().lower() not in _FALSY


def use_numba() -> bool:
    """True when the compiled kernels should be dispatched to."""
    return HAVE_NUMBA and numba_requested()


def njit(fn=None, **kwargs):
    """``numba.njit(cache=True)`` when numba exists, identity otherwise."""
    kwargs.setdefault("cache", True)

    def wrap(f):
        if numba is None:
            return f
        return numba.njit(**kwargs)(f)

    if fn is None:
        return wrap
    return wrap(fn)
