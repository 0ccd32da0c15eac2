"""Kernel backend selection.

The hot numeric kernels (hashed coefficient generation, bit projection,
popcounts, strict-order affine sums) exist twice: as numba-jitted scalar
loops and as vectorized pure-numpy fallbacks. The environment variable
PROJNET_BACKEND picks the set bound at import time:

    auto    use numba when importable, numpy otherwise (default)
    numba   require numba; raise if it cannot be imported
    numpy   force the pure-numpy fallbacks even if numba is installed

Both backends compute identical bits; the numba set is much faster for
the per-entry projection loops. ``benchmarks/bench_backends.py`` times
them against each other.
"""

import os

BACKEND_ENV = "PROJNET_BACKEND"

_choice = os.environ.get(BACKEND_ENV, "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"{BACKEND_ENV} must be one of auto|numba|numpy, got {_choice!r}"
    )

if _choice == "numpy":
    _have_numba = False
else:
    try:
        import numba  # noqa: F401

        _have_numba = True
    except ImportError:
        if _choice == "numba":
            raise
        _have_numba = False

USING_NUMBA = _have_numba
BACKEND = "numba" if USING_NUMBA else "numpy"

if USING_NUMBA:
    from numba import njit as _numba_njit

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        return _numba_njit(*args, **kwargs)

else:

    def njit(*args, **kwargs):
        # Identity decorator; the numpy backend never calls these functions
        # in hot paths, but they stay importable.
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap
