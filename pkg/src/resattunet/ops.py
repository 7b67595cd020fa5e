"""Differentiable operations over :class:`~resattunet.tensor.Tensor`.

Each op evaluates its forward result with numpy (or the compiled kernels)
and, when a tape is recording, registers a vector-Jacobian closure.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, record

CHECK_FINITE = False


class ShapeError(ValueError):
    """Raised when operand extents violate an op's contract."""


def _out(arr: np.ndarray) -> Tensor:
    t = Tensor(arr, dtype=arr.dtype)
    if CHECK_FINITE:
        t.assert_finite()
    return t


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a (B, C, H, W) tensor, got shape {x.shape}")


# --- convolution and linear --------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    _require_4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (Cout, Cin, kH, kW), got {weight.shape}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cin} (input {x.shape}, weight {weight.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    span_h, span_w = H + 2 * padding - kh, W + 2 * padding - kw
    if span_h < 0 or span_w < 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    if span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: output extent not integral for H={H}, W={W}, k={kh}x{kw}, stride={stride}, padding={padding}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias must have shape ({Cout},), got {bias.shape}")
    Ho, Wo = span_h // stride + 1, span_w // stride + 1

    xd = x.data
    wmat = weight.data.reshape(Cout, -1)
    cols = kernels.im2col(xd, kh, kw, stride, padding)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = _out(out.reshape(B, Cout, Ho, Wo))

    def vjp(g):
        g = g.reshape(B, Cout, Ho * Wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(wmat.T, g), C, H, W, kh, kw, stride, padding)
        return gx, gw, gb

    record((x, weight) if bias is None else (x, weight, bias), (out,), vjp)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot map input {x.shape} through weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = _out(out)

    def vjp(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    record((x, weight) if bias is None else (x, weight, bias), (out,), vjp)
    return out


# --- resampling --------------------------------------------------------------

def maxpool2d(x: Tensor, window: int = 2) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling with stride 2; returns the pooled tensor and argmax slots.

    Slots index the window in row-major order; ties resolve to the lowest slot.
    """
    _require_4d(x, "maxpool2d")
    if window != 2:
        raise ShapeError("maxpool2d: only a 2x2 window is supported")
    H, W = x.shape[2:]
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d: spatial extents must be even, got {H}x{W}")
    pooled, idx = kernels.maxpool2x2(x.data)
    out = _out(pooled)
    record((x,), (out,), lambda g: (kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx),))
    return out, idx


def _align_corners_taps(n_in: int, n_out: int, dtype):
    src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, (1.0 - frac).astype(dtype), frac.astype(dtype)


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Corner-aligned bilinear upsampling to twice the height and width."""
    _require_4d(x, "upsample_bilinear2x")
    B, C, H, W = x.shape
    if H < 2 or W < 2:
        raise ShapeError(f"upsample_bilinear2x: need H, W >= 2, got {H}x{W}")
    dt = x.dtype
    th = _align_corners_taps(H, 2 * H, dt)
    tw = _align_corners_taps(W, 2 * W, dt)
    # width pass, then height pass (height moved to the last axis)
    rows = kernels.interp_last_axis(x.data, *tw)
    rows_t = np.ascontiguousarray(rows.transpose(0, 1, 3, 2))
    full_t = kernels.interp_last_axis(rows_t, *th)
    out = _out(np.ascontiguousarray(full_t.transpose(0, 1, 3, 2)))

    def vjp(g):
        g_t = np.ascontiguousarray(g.transpose(0, 1, 3, 2))
        g_rows_t = kernels.interp_last_axis_backward(g_t, *th, H)
        g_rows = np.ascontiguousarray(g_rows_t.transpose(0, 1, 3, 2))
        return (kernels.interp_last_axis_backward(g_rows, *tw, W),)

    record((x,), (out,), vjp)
    return out


# --- reductions --------------------------------------------------------------

def reduce_channel_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and max, each shaped (B, C)."""
    _require_4d(x, "reduce_channel_stats")
    B, C, H, W = x.shape
    flat = x.data.reshape(B, C, H * W)
    arg = np.argmax(flat, axis=2)
    avg = _out(flat.mean(axis=2))
    mx = _out(np.take_along_axis(flat, arg[..., None], axis=2)[..., 0])

    def vjp(g_avg, g_max):
        g = np.broadcast_to((g_avg / (H * W))[..., None], (B, C, H * W)).copy()
        np.put_along_axis(g, arg[..., None], np.take_along_axis(g, arg[..., None], axis=2) + g_max[..., None], axis=2)
        return (g.reshape(B, C, H, W),)

    record((x,), (avg, mx), vjp)
    return avg, mx


def reduce_spatial_stats(x: Tensor) -> Tensor:
    """Stack the per-pixel channel mean (plane 0) and channel max (plane 1)."""
    _require_4d(x, "reduce_spatial_stats")
    B, C, H, W = x.shape
    arg = np.argmax(x.data, axis=1)[:, None]
    mean = x.data.mean(axis=1, keepdims=True)
    mx = np.take_along_axis(x.data, arg, axis=1)
    out = _out(np.concatenate([mean, mx], axis=1))

    def vjp(g):
        gx = np.broadcast_to(g[:, :1] / C, x.shape).copy()
        np.put_along_axis(gx, arg, np.take_along_axis(gx, arg, axis=1) + g[:, 1:], axis=1)
        return (gx,)

    record((x,), (out,), vjp)
    return out


# --- elementwise -------------------------------------------------------------

def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    pos = x.data >= 0
    out = _out(np.where(pos, x.data, x.data * x.dtype.type(alpha)))
    record((x,), (out,), lambda g: (np.where(pos, g, g * g.dtype.type(alpha)),))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = _out(s)
    record((x,), (out,), lambda g: (g * s * (1 - s),))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = _out(a.data + b.data)
    record((a, b), (out,), lambda g: (g, g))
    return out


def _gate_view(gate: np.ndarray, target_shape) -> np.ndarray:
    """View a broadcastable gate so it lines up with a (B, C, H, W) target."""
    B, C, H, W = target_shape
    if gate.shape == (B, C):
        return gate[:, :, None, None]
    if gate.shape == (B, 1, H, W):
        return gate
    raise ShapeError(f"mul: gate shape {gate.shape} cannot broadcast against {tuple(target_shape)}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.

    Besides identical shapes, ``a`` may be a (B, C) channel gate or a
    (B, 1, H, W) spatial gate for a (B, C, H, W) operand ``b``.
    """
    if a.shape == b.shape:
        out = _out(a.data * b.data)
        record((a, b), (out,), lambda g: (g * b.data, g * a.data))
        return out
    if b.data.ndim != 4:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are not compatible")
    gv = _gate_view(a.data, b.shape)
    out = _out(gv * b.data)

    def vjp(g):
        ga = (g * b.data).sum(axis=(2, 3) if a.data.ndim == 2 else 1, keepdims=a.data.ndim != 2)
        return ga, g * gv

    record((a, b), (out,), vjp)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial extents differ, {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = _out(np.concatenate([a.data, b.data], axis=1))
    record((a, b), (out,), lambda g: (g[:, :ca], g[:, ca:]))
    return out


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_channels` at channel boundary ``at``."""
    _require_4d(x, "split_channels")
    if not 0 < at < x.shape[1]:
        raise ShapeError(f"split_channels: boundary {at} outside 1..{x.shape[1] - 1}")
    first = _out(x.data[:, :at].copy())
    second = _out(x.data[:, at:].copy())
    record((x,), (first, second), lambda g1, g2: (np.concatenate([g1, g2], axis=1),))
    return first, second


def sum_all(x: Tensor) -> Tensor:
    out = _out(np.asarray(x.data.sum(), dtype=x.dtype))
    record((x,), (out,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    return out


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)``; used to project outputs for gradient checks."""
    out = _out(np.asarray((x.data * weights).sum(), dtype=x.dtype))
    record((x,), (out,), lambda g: (g * weights,))
    return out
