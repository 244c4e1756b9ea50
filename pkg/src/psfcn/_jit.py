"""Numba switch.

Set ``PSFCN_DISABLE_NUMBA=1`` to force the pure-numpy kernels (useful for
debugging and for benchmarking the two paths against each other).
"""

import os

DISABLED = os.environ.get("PSFCN_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if DISABLED:
        raise ImportError("numba disabled by PSFCN_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


__all__ = ["DISABLED", "HAVE_NUMBA", "njit"]
