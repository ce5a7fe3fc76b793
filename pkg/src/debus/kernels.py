"""Hot-loop kernels, compiled when available.

The Cython extension ``_ckernels`` is preferred. Setting the environment
variable ``DEBUS_PURE_PYTHON=1`` (or a failed import) selects the numpy
fallback in ``_kernels_py``. ``BACKEND`` names the active implementation.
"""
import os

from . import _kernels_py

if os.environ.get("DEBUS_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

im2col = _impl.im2col
col2im = _impl.col2im
linear_sum_assignment = _impl.linear_sum_assignment
greedy_match = _impl.greedy_match


def available_backends():
    """Map backend name -> module for every importable implementation."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
