"""Backend selection for the hot kernels.

Set ``SSFL_BACKEND=numpy`` to force the pure-numpy path; the default is
``numba`` when it imports cleanly.
"""
import os

BACKEND = os.environ.get("SSFL_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise ValueError(f"SSFL_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")

HAVE_NUMBA = False
if BACKEND == "numba":
    try:
        from numba import njit
        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover
        BACKEND = "numpy"

USE_NUMBA = HAVE_NUMBA and BACKEND == "numba"

if not HAVE_NUMBA:
    def njit(*args, **kwargs):  # noqa: D103
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
