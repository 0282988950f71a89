"""Backend selection for the dense network kernels.

The compiled core (``offmarl._fastcore``) is preferred when importable;
otherwise the numpy implementation is used. ``OFFMARL_BACKEND=numpy`` or
``OFFMARL_BACKEND=cython`` forces a choice (forcing the compiled backend
raises if the extension is missing).
"""

import os

from . import _kernels_numpy
from .errors import ConfigError

_requested = os.environ.get("OFFMARL_BACKEND", "auto").lower()

if _requested == "numpy":
    _impl = _kernels_numpy
elif _requested == "cython":
    from . import _fastcore as _impl
elif _requested == "auto":
    try:
        from . import _fastcore as _impl
    except ImportError:
        _impl = _kernels_numpy
else:
    raise ConfigError(f"unknown OFFMARL_BACKEND value: {_requested!r}")

forward_batch = _impl.forward_batch
backward_batch = _impl.backward_batch
adam_step = _impl.adam_step


def backend_name() -> str:
    return _impl.BACKEND_NAME
