"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``FEDEU_BACKEND=numpy`` to
force the fallback; the numba path is used otherwise whenever numba imports.
"""
import os

from . import _numpy

BACKEND = os.environ.get("FEDEU_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise ValueError(f"FEDEU_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")

if BACKEND == "numba":
    try:
        from . import _numba as _impl
    except ImportError:  # pragma: no cover - numba missing
        BACKEND = "numpy"
        _impl = _numpy
else:
    _impl = _numpy

im2col = _impl.im2col
col2im = _impl.col2im
upsample_backward = _impl.upsample_backward
lgamma = _impl.lgamma
digamma = _impl.digamma
trigamma = _impl.trigamma
topk_mean = _impl.topk_mean

__all__ = ["BACKEND", "im2col", "col2im", "upsample_backward", "lgamma", "digamma", "trigamma", "topk_mean"]
