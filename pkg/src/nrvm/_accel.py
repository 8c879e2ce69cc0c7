"""Numba switch.

Set ``NRVM_DISABLE_NUMBA=1`` to run every hot kernel through its pure-numpy
path instead of the compiled one. The flag is read once, at import time.
"""

import functools
import os

_FLAG = os.environ.get("NRVM_DISABLE_NUMBA", "").strip().lower()

try:
    import numba as nb
except ImportError:  # pragma: no cover
    nb = None

USE_NUMBA = nb is not None and _FLAG not in ("1", "true", "yes", "on")

# serial, cached kernels: bit-reproducible across runs
njit = functools.partial(nb.njit, cache=True, nogil=True) if nb is not None else None


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
