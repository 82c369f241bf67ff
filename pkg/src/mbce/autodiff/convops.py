"""Convolution, transposed convolution, and pooling.

conv2d uses the cross-correlation convention. Forward/backward are built on
an im2col/col2im pair that are exact adjoints of each other, so
``<conv2d(x), y> == <x, conv_transpose2d(y)>`` holds for a shared kernel and
mirrored geometry. The flattened GEMM is the single performance-sensitive
routine in the engine.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import Tensor, _record

__all__ = ["conv2d", "conv_transpose2d", "max_pool2d", "adaptive_avg_pool"]


def _pair(v):
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _conv_out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _im2col(x, kh, kw, sh, sw, ph, pw):
    b, c, h, w = x.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    ho, wo = _conv_out(h, kh, sh, ph), _conv_out(w, kw, sw, pw)
    if ph or pw:
        xp = np.zeros((b, c, hp, wp), dtype=x.dtype)
        xp[:, :, ph : ph + h, pw : pw + w] = x
    else:
        xp = x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), (ho, wo)


def _col2im(cols, out_shape, kh, kw, sh, sw, ph, pw):
    """Exact adjoint of :func:`_im2col` (scatter-add of window columns)."""
    b, c, h, w = out_shape
    hp, wp = h + 2 * ph, w + 2 * pw
    ho, wo = _conv_out(h, kh, sh, ph), _conv_out(w, kw, sw, pw)
    cols6 = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += cols6[:, :, :, :, i, j]
    return xp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else xp


def conv2d(x: Tensor, k: Tensor, stride=1, pad=0) -> Tensor:
    """Batched NCHW cross-correlation with kernel ``[c_out, c_in, kh, kw]``."""
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    co, ci, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    b, c, h, w = x.shape
    if c != ci:
        raise ValueError(f"input channels {c} != kernel channels {ci}")
    ho, wo = _conv_out(h, kh, sh, ph), _conv_out(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"empty output for input {h}x{w}, kernel {kh}x{kw}")

    cols, _ = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    w2 = k.data.reshape(co, ci * kh * kw)
    out = (cols @ w2.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(g, needs):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, co)
        gx = gk = None
        if needs[0]:
            gx = _col2im(gf @ w2, x.shape, kh, kw, sh, sw, ph, pw)
        if needs[1]:
            gk = (gf.T @ cols).reshape(k.shape)
        return gx, gk

    return _record(out, (x, k), bwd)


def conv_transpose2d(x: Tensor, k: Tensor, stride=1, pad=0, out_hw=None) -> Tensor:
    """Adjoint geometry of conv2d, kernel ``[c_in, c_out, kh, kw]``.

    Output spatial dims default to ``(in - 1)*stride - 2*pad + k``; pass
    ``out_hw`` to select any size whose conv2d shape map returns the input
    dims (stride > 1 leaves that ambiguous).
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-D input and kernel")
    ci, co, kh, kw = k.shape
    b, c, h, w = x.shape
    if c != ci:
        raise ValueError(f"input channels {c} != kernel channels {ci}")
    if out_hw is None:
        ho, wo = (h - 1) * sh - 2 * ph + kh, (w - 1) * sw - 2 * pw + kw
    else:
        ho, wo = _pair(out_hw)
    if ho < 1 or wo < 1:
        raise ValueError("empty transposed-convolution output")
    if _conv_out(ho, kh, sh, ph) != h or _conv_out(wo, kw, sw, pw) != w:
        raise ValueError(
            f"output {ho}x{wo} is inconsistent with input {h}x{w} under the adjoint shape map"
        )

    xf = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(b * h * w, ci)
    w2 = k.data.reshape(ci, co * kh * kw)
    cols = xf @ w2
    out = _col2im(cols, (b, co, ho, wo), kh, kw, sh, sw, ph, pw)

    def bwd(g, needs):
        gcols, _ = _im2col(g, kh, kw, sh, sw, ph, pw)
        gx = gk = None
        if needs[0]:
            gx = (gcols @ w2.T).reshape(b, h, w, ci).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        if needs[1]:
            gk = (xf.T @ gcols).reshape(k.shape)
        return gx, gk

    return _record(out, (x, k), bwd)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, floor semantics on odd dims.

    The backward pass routes gradient to the first maximal element of each
    window in row-major scan order.
    """
    if x.ndim != 4:
        raise ValueError("max_pool2d expects a 4-D tensor")
    b, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"spatial dims {h}x{w} smaller than the 2x2 window")
    ho, wo = h // 2, w // 2
    crop = x.data[:, :, : 2 * ho, : 2 * wo]
    blocks = crop.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(b, c, ho, wo, 4)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g, needs):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gcrop = gflat.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gcrop = gcrop.reshape(b, c, 2 * ho, 2 * wo)
        if (2 * ho, 2 * wo) == (h, w):
            return (gcrop,)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * ho, : 2 * wo] = gcrop
        return (gx,)

    return _record(np.ascontiguousarray(out), (x,), bwd)


def adaptive_avg_pool(x: Tensor, out_hw) -> Tensor:
    """Average pooling onto a fixed output grid (same cell split as torch)."""
    if x.ndim != 4:
        raise ValueError("adaptive_avg_pool expects a 4-D tensor")
    oh, ow = _pair(out_hw)
    b, c, h, w = x.shape
    if oh < 1 or ow < 1 or oh > h or ow > w:
        raise ValueError(f"bad adaptive pool target {oh}x{ow} for input {h}x{w}")

    def bounds(n, o):
        return [(n * i // o, -(-n * (i + 1) // o)) for i in range(o)]

    hb, wb = bounds(h, oh), bounds(w, ow)
    out = np.empty((b, c, oh, ow), dtype=x.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def bwd(g, needs):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                gx[:, :, h0:h1, w0:w1] += g[:, :, i : i + 1, j : j + 1] / area
        return (gx,)

    return _record(out, (x,), bwd)
