"""Hot kernels: compiled when the extension is built, numpy otherwise.

Set ``INCDET_PURE_PYTHON=1`` before import to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("INCDET_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
nms = _impl.nms
greedy_match = _impl.greedy_match
swap_refine = _impl.swap_refine

__all__ = ["BACKEND", "im2col", "col2im", "nms", "greedy_match", "swap_refine"]
