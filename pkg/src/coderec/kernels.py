"""Backend selection for the nearest-centroid hot loops.

The compiled Cython extension is used when available; otherwise the numpy
implementation takes over. Set CODEREC_PURE_PYTHON=1 to force the fallback
(useful for benchmarking and for debugging the extension).
"""

import os

__all__ = ["assign_nearest", "update_means", "backend"]

_force_python = os.environ.get("CODEREC_PURE_PYTHON", "") == "1"

try:
    if _force_python:
        raise ImportError("pure-python kernels forced via CODEREC_PURE_PYTHON")
    from . import _ckernels as _impl
    _BACKEND = "compiled"
except ImportError:
    from . import _kernels_py as _impl
    _BACKEND = "python"

assign_nearest = _impl.assign_nearest
update_means = _impl.update_means


def backend():
    """Name of the active kernel backend: 'compiled' or 'python'."""
    return _BACKEND
