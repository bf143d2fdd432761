"""Kernel backend selection.

Hot numeric kernels ship in two flavors: numba-compiled loops and pure
numpy. Setting ``QT1MAP_BACKEND=numpy`` or ``QT1MAP_BACKEND=numba``
forces one flavor globally. The default (``auto``) uses numba for
scalar-heavy kernels (SIR voxel fitting, Bloch integration, Monte Carlo
binning) and BLAS-backed numpy for the convolution kernels, where
vectorized matmuls are faster than compiled loops.

The flag is read at import time; set the environment variable before
importing qt1map. ``benchmarks/bench_kernels.py`` compares both paths.
"""

import os

_CHOICES = ("auto", "numba", "numpy")


def backend_choice() -> str:
    val = os.environ.get("QT1MAP_BACKEND", "auto").lower()
    if val not in _CHOICES:
        raise ValueError(
            f"QT1MAP_BACKEND must be one of {_CHOICES}, got {val!r}"
        )
    return val


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_enabled(default_numba: bool = True) -> bool:
    """Whether a kernel should use its numba flavor.

    ``default_numba`` is the kernel's preference under ``auto``.
    """
    choice = backend_choice()
    if choice == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("QT1MAP_BACKEND=numba but numba is not importable")
        return True
    if choice == "numpy":
        return False
    return HAVE_NUMBA and default_numba


def maybe_jit(default_numba: bool = True, **opts):
    """Decorator: njit-compile the function, or return it unchanged.

    Kernels written for this decorator restrict themselves to the
    numpy subset numba supports, so the undecorated function is the
    pure-Python/numpy fallback.
    """

    def wrap(func):
        if numba_enabled(default_numba):
            return numba.njit(cache=True, **opts)(func)
        return func

    return wrap
