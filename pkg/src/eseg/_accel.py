"""Backend selection for the hot kernels.

Set ``ESEG_DISABLE_NUMBA=1`` to force the pure-numpy path. ``ESEG_THREADS``
caps the numba worker count.
"""

import os

JIT_OPTIONS = {"nogil": True, "cache": True}


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _env_flag("ESEG_DISABLE_NUMBA")

if HAVE_NUMBA and os.environ.get("ESEG_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["ESEG_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
