"""Backend selection for the numeric kernels.

Array kernels exist twice: a numba ``@njit`` loop version and a vectorised
numpy version. ``MOE_ROBUST_NUMBA=0`` (or a missing numba install) turns
``njit`` into a no-op and pins the numpy path, so nothing is compiled.
With numba enabled, :func:`set_backend` switches the array kernels at
runtime, which the benchmark and the cross-backend tests rely on.
"""

import os
from contextlib import contextmanager

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

_FALSY = {"0", "false", "no", "off", ""}


def _env_wants_numba():
    return os.environ.get("MOE_ROBUST_NUMBA", "1").strip().lower() not in _FALSY


NUMBA_ENABLED = NUMBA_AVAILABLE and _env_wants_numba()
_backend = "numba" if NUMBA_ENABLED else "numpy"


def njit(func=None, **kwargs):
    """``numba.njit`` when numba is enabled, identity otherwise."""
    kwargs.setdefault("cache", True)

    def wrap(f):
        if NUMBA_ENABLED:
            return numba.njit(**kwargs)(f)
        return f

    if func is None:
        return wrap
    return wrap(func)


def get_backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_ENABLED:
        raise RuntimeError("numba kernels are disabled (MOE_ROBUST_NUMBA=0 or numba missing)")
    _backend = name


def use_numba():
    return _backend == "numba"


@contextmanager
def backend(name):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
