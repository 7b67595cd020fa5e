"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, or when
``RESATTUNET_KERNELS=python`` is set. Every function here has a twin with
the same signature in ``_ckernels.pyx``.
"""
import numpy as np


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` of shape (B, C, H, W) into (B, C*kh*kw, Ho*Wo) columns."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if pad:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = x
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(B, C * kh * kw, Ho * Wo)


def col2im(cols, C, H, W, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto a (B, C, H, W) grid."""
    B = cols.shape[0]
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = cols.reshape(B, C, kh, kw, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])


def maxpool2x2(x):
    """Return (pooled, argmax) where argmax holds the row-major window slot 0..3.

    Ties go to the lowest slot.
    """
    B, C, H, W = x.shape
    windows = np.stack(
        [x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]],
        axis=-1,
    )
    idx = np.argmax(windows, axis=-1).astype(np.int8)
    out = np.take_along_axis(windows, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx):
    B, C, Ho, Wo = grad.shape
    dx = np.zeros((B, C, 2 * Ho, 2 * Wo), dtype=grad.dtype)
    for slot, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, di::2, dj::2] = np.where(idx == slot, grad, 0)
    return dx


def interp_last_axis(x, i0, i1, w0, w1):
    """Two-tap linear interpolation along the last axis."""
    return x[..., i0] * w0 + x[..., i1] * w1


def interp_last_axis_backward(grad, i0, i1, w0, w1, n_in):
    out = np.zeros(grad.shape[:-1] + (n_in,), dtype=grad.dtype)
    flat = out.reshape(-1, n_in)
    g = grad.reshape(-1, grad.shape[-1])
    # all first-tap contributions, then all second-tap ones; the compiled twin
    # follows the same order so both backends agree bitwise
    for i in range(g.shape[1]):
        flat[:, i0[i]] += g[:, i] * w0[i]
    for i in range(g.shape[1]):
        flat[:, i1[i]] += g[:, i] * w1[i]
    return out
