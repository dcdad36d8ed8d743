"""Pure-numpy implementations of the convolution kernels.

These mirror the compiled ``_ckernels`` module function for function and are
used whenever the extension is unavailable (or ``HEATGRID_PURE_PYTHON=1``).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x, kh, kw, pad):
    """Patch tensor of shape ``(B, C*kh*kw, Ho*Wo)``.

    Row ``(c, i, j)`` of sample ``b`` holds input channel ``c`` shifted by
    kernel offset ``(i, j)`` over every output pixel, zero outside the image.
    """
    B, C, H, W = x.shape
    Ho = H + 2 * pad - kh + 1
    Wo = W + 2 * pad - kw + 1
    win = sliding_window_view(_pad(x, pad), (Ho, Wo), axis=(2, 3))
    # win: (B, C, kh, kw, Ho, Wo)
    return np.ascontiguousarray(win).reshape(B, C * kh * kw, Ho * Wo)


def col2im(cols, B, C, H, W, kh, kw, pad):
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    Ho = H + 2 * pad - kh + 1
    Wo = W + 2 * pad - kw + 1
    c6 = cols.reshape(B, C, kh, kw, Ho, Wo)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + Ho, j:j + Wo] += c6[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def conv2d_direct(x, w, b, pad):
    """Convolution evaluated straight from its defining sum.

    Every output element is accumulated from zero over ``(c, i, j)`` in
    lexicographic order, then the bias is added. This fixes the rounding
    sequence, so the result is bitwise reproducible against a scalar loop.
    """
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho = H + 2 * pad - kh + 1
    Wo = W + 2 * pad - kw + 1
    xp = _pad(x, pad)
    acc = np.zeros((B, Co, Ho, Wo), dtype=x.dtype)
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                acc += w[None, :, c, i, j, None, None] * xp[:, c:c + 1, i:i + Ho, j:j + Wo]
    acc += b[None, :, None, None]
    return acc
