"""Hot kernels, compiled when available.

The Cython extension is used if it was built; otherwise the numpy fallback
is loaded.  Set ``VMMT_KERNELS=python`` to force the fallback.
"""
import os

from . import _lstm_py
from . import _lstm_py as fallback

__all__ = ["BACKEND", "available_backends", "fallback", "lstm_backward", "lstm_forward"]

BACKEND = "python"
if os.environ.get("VMMT_KERNELS", "").lower() != "python":
    try:
        from . import _lstm_c as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _lstm_py
else:
    _impl = _lstm_py

lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward


def available_backends() -> dict:
    backends = {"python": _lstm_py}
    try:
        from . import _lstm_c
        backends["cython"] = _lstm_c
    except ImportError:
        pass
    return backends
