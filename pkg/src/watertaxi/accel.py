"""Numba on/off switch for the hot kernels.

The numeric kernels in :mod:`watertaxi.kernels` are written as plain numpy
code and decorated with ``@njit``. Setting the environment variable
``WATERTAXI_NUMBA=0`` (or numba being unavailable) selects the pure-numpy
fallback: the same functions run undecorated. The flag is read once at
import time.
"""

import os


def _want_numba() -> bool:
    flag = os.environ.get("WATERTAXI_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


NUMBA_ACTIVE = False

if _want_numba():
    try:
        from numba import njit as _numba_njit

        NUMBA_ACTIVE = True
    except ImportError:
        NUMBA_ACTIVE = False

if NUMBA_ACTIVE:

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        return _numba_njit(*args, **kwargs)

else:

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap
