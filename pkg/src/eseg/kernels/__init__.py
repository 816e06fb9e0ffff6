"""Hot loop kernels with a numba and a pure-numpy implementation.

``active`` is the module picked at import time (see ``eseg._accel``);
``get_backend`` returns either one explicitly, which the tests and the
benchmark use to compare them.
"""

from .. import _accel
from . import _numpy

if _accel.HAVE_NUMBA:
    from . import _numba
else:  # pragma: no cover
    _numba = None

BACKENDS = {"numpy": _numpy}
if _numba is not None:
    BACKENDS["numba"] = _numba


def get_backend(name=None):
    if name is None:
        name = _accel.backend_name()
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; available: {sorted(BACKENDS)}") from None


active = get_backend()
