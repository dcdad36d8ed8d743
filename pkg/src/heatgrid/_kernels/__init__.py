"""Hot convolution kernels with a compiled core and a numpy fallback.

The Cython extension ``_ckernels`` is used when it has been built; otherwise,
or when ``HEATGRID_PURE_PYTHON=1`` is set, the numpy implementations in
``_pykernels`` are loaded. ``BACKEND`` names the active choice.
"""
import os

from . import _pykernels

if os.environ.get("HEATGRID_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
conv2d_direct = _impl.conv2d_direct

__all__ = ["BACKEND", "im2col", "col2im", "conv2d_direct"]
