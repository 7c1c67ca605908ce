"""Backend selection for the voxel kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Setting ``VASOTRACK_PURE_PYTHON=1`` forces the fallback.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("VASOTRACK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this build")
        return _compiled
    if backend == "python":
        return _fallback
    raise ValueError(f"unknown backend {backend!r}")


def window_extreme(x, offsets, inner_max, outer_max, backend=None):
    """Two-level windowed max/min with replicate padding; returns (values, src).

    ``offsets`` has shape (E, K, 3): E elements of K offsets each. See
    ``_kernels.window_extreme`` for the tie rule.
    """
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float32)
    x = np.ascontiguousarray(x)
    offsets = np.ascontiguousarray(offsets, dtype=np.int32)
    return _impl(backend).window_extreme(x, offsets, bool(inner_max), bool(outer_max))


def scatter_add(src, grad, n, backend=None):
    """float64 accumulation of ``grad`` into ``n`` bins at flat indices ``src``."""
    src = np.ascontiguousarray(src, dtype=np.int64).ravel()
    grad = np.ascontiguousarray(grad, dtype=np.float64).ravel()
    return _impl(backend).scatter_add(src, grad, int(n))
