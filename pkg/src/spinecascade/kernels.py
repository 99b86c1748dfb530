"""Backend selection for the volumetric inner loops.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Setting ``SPINECASCADE_PURE_PYTHON=1`` forces
the numpy path, which is also what ``use_backend("python")`` does at runtime.
"""

import os

from . import _kernels_py

try:
    if os.environ.get("SPINECASCADE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active = _BACKENDS.get("cython", _kernels_py)


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "cython" if _active is _compiled and _compiled is not None else "python"


def use_backend(name):
    """Switch the active backend; returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    previous = backend_name()
    _active = _BACKENDS[name]
    return previous


def im2col(x, k, stride, pad):
    return _active.im2col(x, k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    return _active.col2im(cols, tuple(int(s) for s in shape), k, stride, pad)


def maxpool2_forward(x):
    return _active.maxpool2_forward(x)


def maxpool2_backward(grad_out, arg):
    return _active.maxpool2_backward(grad_out, arg)
