"""Kernel backend selection.

The compiled extension is used when it was built and imports cleanly;
setting ``TGI_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

import numpy as np

from . import _xcov_py

BACKEND = "python"
_compiled = None

if os.environ.get("TGI_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _xcov as _compiled
        BACKEND = "cython"
    except ImportError:  # extension not built
        _compiled = None


def available_backends():
    return ("cython", "python") if _compiled is not None else ("python",)


def xcov_window(sig, idl, dy_min, dy_max, dx_min, dx_max, backend=None):
    """Direct overlap-restricted cross-covariance over a rectangle of shifts."""
    backend = backend or BACKEND
    sig = np.ascontiguousarray(sig, dtype=np.float64)
    idl = np.ascontiguousarray(idl, dtype=np.float64)
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernel is not available")
        return _compiled.xcov_window(sig, idl, dy_min, dy_max, dx_min, dx_max)
    if backend == "python":
        return _xcov_py.xcov_window(sig, idl, dy_min, dy_max, dx_min, dx_max)
    raise ValueError(f"unknown backend {backend!r}")
