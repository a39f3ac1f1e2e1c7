"""Backend switch for the hot kernels.

Every kernel exists twice: a numba ``@njit`` version and a pure numpy/Python
version. The numba path is used when numba imports cleanly and the
``OBBSEG_DISABLE_NUMBA`` environment variable is unset (or ``0``). Setting
the variable skips the numba import entirely.

Both paths must produce identical results; the test-suite checks this and
``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import contextlib
import os

ENV_FLAG = "OBBSEG_DISABLE_NUMBA"


def _env_disabled() -> bool:
    return os.environ.get(ENV_FLAG, "0").strip().lower() not in ("", "0", "false", "no")


NUMBA_AVAILABLE = False
if not _env_disabled():
    try:
        import numba as _numba

        NUMBA_AVAILABLE = True
    except ImportError:  # pragma: no cover - depends on environment
        _numba = None

_use_numba = NUMBA_AVAILABLE


def njit(func):
    """Compile ``func`` in nopython mode, or return it untouched without numba."""
    if NUMBA_AVAILABLE:
        return _numba.njit(cache=True, nogil=True)(func)
    return func


def numba_enabled() -> bool:
    return _use_numba


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` for subsequent kernel calls."""
    global _use_numba
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError(f"numba backend unavailable (missing or disabled via {ENV_FLAG})")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")


@contextlib.contextmanager
def backend(name: str):
    prev = _use_numba
    set_backend(name)
    try:
        yield
    finally:
        _set_raw(prev)


def _set_raw(flag: bool) -> None:
    global _use_numba
    _use_numba = flag


class Kernel:
    """A kernel with a numba and a numpy implementation behind one callable."""

    __slots__ = ("name", "numba_impl", "numpy_impl")

    def __init__(self, numpy_impl, numba_impl=None):
        self.name = numpy_impl.__name__
        self.numpy_impl = numpy_impl
        self.numba_impl = numba_impl

    def __call__(self, *args):
        if _use_numba and self.numba_impl is not None:
            return self.numba_impl(*args)
        return self.numpy_impl(*args)

    def __repr__(self) -> str:
        return f"Kernel({self.name})"


def kernel(numpy_impl):
    """Decorator: the decorated loop function becomes the numba side.

    Usage::

        def _erode_np(...): ...          # vectorised numpy version

        @kernel(_erode_np)
        def erode_kernel(...): ...       # loop version, compiled by numba
    """

    def wrap(loop_func):
        return Kernel(numpy_impl, njit(loop_func) if NUMBA_AVAILABLE else None)

    return wrap


def loop_kernel(loop_func):
    """Kernel whose numpy fallback is the same loop source, run uncompiled.

    Used for inherently sequential algorithms (border following, union-find)
    that have no useful vectorised form.
    """
    k = Kernel(loop_func, njit(loop_func) if NUMBA_AVAILABLE else None)
    return k
