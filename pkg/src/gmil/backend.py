"""Kernel backend selection.

Two interchangeable implementations of the segment kernels exist: a compiled
Cython module (``gmil._speedups``) and a pure-numpy fallback
(``gmil._kernels_np``). The compiled one is preferred when it imports
cleanly; set ``GMIL_BACKEND=numpy`` or ``GMIL_BACKEND=cython`` to force a
choice. Forcing ``cython`` raises if the extension is missing rather than
silently degrading.

Every kernel is re-exported here so the rest of the package never imports
either implementation directly.
"""

import os

from . import _kernels_np

_FORCED = os.environ.get("GMIL_BACKEND", "").strip().lower()

if _FORCED not in ("", "numpy", "cython"):
    raise ImportError(
        f"GMIL_BACKEND={_FORCED!r} not recognised; use 'numpy' or 'cython'"
    )

if _FORCED == "numpy":
    _impl = _kernels_np
    BACKEND_NAME = "numpy"
else:
    try:
        from . import _speedups as _impl
        BACKEND_NAME = "cython"
    except ImportError:
        if _FORCED == "cython":
            raise
        _impl = _kernels_np
        BACKEND_NAME = "numpy"

DIV_SQUARED_ERROR = _impl.DIV_SQUARED_ERROR
DIV_FORWARD_KL = _impl.DIV_FORWARD_KL
DIV_REVERSE_KL = _impl.DIV_REVERSE_KL

seg_sum = _impl.seg_sum
seg_softmax = _impl.seg_softmax
seg_softmax_vjp = _impl.seg_softmax_vjp
seg_weighted_pool = _impl.seg_weighted_pool
seg_weighted_pool_vjp = _impl.seg_weighted_pool_vjp
seg_colmax = _impl.seg_colmax
seg_colmax_vjp = _impl.seg_colmax_vjp
chain_smooth = _impl.chain_smooth
chain_smooth_vjp = _impl.chain_smooth_vjp
seg_positions = _impl.seg_positions
normal_reference_seg = _impl.normal_reference_seg
divergence_seg = _impl.divergence_seg
