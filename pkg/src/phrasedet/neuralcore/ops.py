"""Differentiable operations on :class:`Tensor`.

Convolutions are cross-correlations with zero "same" padding at stride 1.
Max-pooling backward routes the gradient to the first maximal element of each
window in row-major scan order; the LReLU derivative at 0 is the leakage.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, record


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise and structural --------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return record(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul supports 1-D and 2-D operands only")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data) if a.ndim == 2 else g * b.data
            else:
                ga = g @ b.data.T
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g) if b.ndim == 2 else g * a.data
            else:
                gb = a.data.T @ g
        return ga, gb
    return record(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return record(np.sum(a.data, axis=axis), (a,), bw)


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)
    return record(a.data[idx], (a,), bw)


def take_rows(a: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.intp)
    return index(a, (rows,))


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return record(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def lrelu(x: Tensor, leakage: float = 0.1) -> Tensor:
    pos = x.data > 0
    slope = np.where(pos, 1.0, leakage)
    return record(x.data * slope, (x,), lambda g: (g * slope,))


def sum_squares(x: Tensor) -> Tensor:
    return record(np.sum(x.data * x.data), (x,), lambda g: (2.0 * g * x.data,))


def weighted_sum(x: Tensor, weights) -> Tensor:
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)
    return record(np.sum(w * x.data), (x,), lambda g: (g * w,))


def logistic_cross_entropy(logits, labels) -> Tensor:
    """Elementwise -l log s(f) - (1-l) log(1-s(f)) in softplus form."""
    f = as_tensor(logits)
    lab = np.broadcast_to(np.asarray(labels, dtype=np.float64), f.shape)
    z = f.data
    softplus = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    sig = np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))
    return record(softplus - lab * z, (f,), lambda g: (g * (sig - lab),))


# -- dense ---------------------------------------------------------------------

def dense(x, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x W^T + b`` for ``x`` of shape (D_in,) or (N, D_in)."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense shape mismatch: x{x.shape} W{weight.shape} b{bias.shape}")

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb
    return record(x.data @ weight.data.T + bias.data, (x, weight, bias), bw)


# -- 1-D convolution and pooling -------------------------------------------------

def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def conv1d(x, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-length 1-D cross-correlation.

    ``x`` is (C_in, L) or (N, C_in, L); ``kernel`` is (C_out, C_in, K).
    """
    x = as_tensor(x)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernel.ndim != 3 or xd.shape[1] != kernel.shape[1] \
            or bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv1d shape mismatch: x{x.shape} k{kernel.shape} b{bias.shape}")
    n, c, length = xd.shape
    k = kernel.shape[2]
    left, right = _same_pad(k)
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right)))
    win = sliding_window_view(xp, k, axis=2)  # (N, C, L, K)
    out = np.tensordot(win, kernel.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    out = out + bias.data[None, :, None]

    def bw(g):
        g3 = g[None] if squeeze else g
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g3, win, axes=([0, 2], [0, 2]))
        if bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            cols = np.tensordot(g3, kernel.data, axes=([1], [0]))  # (N, L, C, K)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + length] += cols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, left:left + length]
            gx = gx[0] if squeeze else gx
        return gx, gk, gb
    return record(out[0] if squeeze else out, (x, kernel, bias), bw)


def maxpool1d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max-pooling over the last axis (stride = window)."""
    length = x.shape[-1]
    if length % window:
        raise ShapeError(f"maxpool1d needs length divisible by {window}, got {length}")
    lead = x.shape[:-1]
    blocks = x.data.reshape(*lead, length // window, window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(x.shape),)
    return record(out, (x,), bw)


# -- 2-D convolution and pooling ---------------------------------------------------

def conv2d(x, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-size 2-D cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernel`` is (C_out, C_in, K, K).
    """
    x = as_tensor(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4 or xd.shape[1] != kernel.shape[1] \
            or bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d shape mismatch: x{x.shape} k{kernel.shape} b{bias.shape}")
    n, c, h, w = xd.shape
    kh, kw = kernel.shape[2:]
    (t, b_), (l, r) = _same_pad(kh), _same_pad(kw)
    xp = np.pad(xd, ((0, 0), (0, 0), (t, b_), (l, r)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, H, W, KH, KW)
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            cols = np.tensordot(g4, kernel.data, axes=([1], [0]))  # (N, H, W, C, KH, KW)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, t:t + h, l:l + w]
            gx = gx[0] if squeeze else gx
        return gx, gk, gb
    return record(out[0] if squeeze else out, (x, kernel, bias), bw)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping 2-D max-pooling over the last two axes."""
    h, w = x.shape[-2:]
    if h % window or w % window:
        raise ShapeError(f"maxpool2d needs sides divisible by {window}, got {(h, w)}")
    lead = x.shape[:-2]
    nl = len(lead)
    blocks = x.data.reshape(*lead, h // window, window, w // window, window)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    flat = blocks.transpose(perm).reshape(*lead, h // window, w // window, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        gb = gf.reshape(*lead, h // window, w // window, window, window)
        inv = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
        return (gb.transpose(inv).reshape(x.shape),)
    return record(out, (x,), bw)


# -- RoI pooling ---------------------------------------------------------------------

def roi_bins(box, stride: int, bins: int, fh: int, fw: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Feature-map cell ranges ``[start, end)`` of each bin along y and x.

    The box is projected by 1/stride, quantized outward (floor start, ceil
    end) and clamped to the map; bin edges are evenly spaced and rounded half
    up, and an empty bin is widened to one cell.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    xs, xe = max(math.floor(x1 / stride), 0), min(math.ceil(x2 / stride), fw)
    ys, ye = max(math.floor(y1 / stride), 0), min(math.ceil(y2 / stride), fh)
    if xe <= xs or ye <= ys:
        raise ValueError(f"box {[x1, y1, x2, y2]} falls outside the {fh}x{fw} feature map")
    return _split(ys, ye, bins, fh), _split(xs, xe, bins, fw)


def _split(start: int, end: int, bins: int, limit: int) -> list[tuple[int, int]]:
    span = end - start
    edges = [start + math.floor(i * span / bins + 0.5) for i in range(bins + 1)]
    out = []
    for lo, hi in zip(edges, edges[1:]):
        if hi <= lo:
            lo = min(lo, limit - 1)
            hi = lo + 1
        out.append((lo, hi))
    return out


def roi_pool(fmap: Tensor, boxes, stride: int, bins: int) -> Tensor:
    """Max-pool each box of ``boxes`` (B, 4) in image coordinates into (C, P, P)."""
    if fmap.ndim != 3:
        raise ShapeError(f"roi_pool needs a (C, H, W) map, got {fmap.shape}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    c, fh, fw = fmap.shape
    flat = fmap.data.reshape(c, fh * fw)
    n = len(boxes)
    out = np.empty((n, c, bins, bins))
    arg = np.empty((n, c, bins, bins), dtype=np.intp)
    col = np.arange(fw)
    for bi, box in enumerate(boxes):
        ybins, xbins = roi_bins(box, stride, bins, fh, fw)
        for py, (y0, y1) in enumerate(ybins):
            for px, (x0, x1) in enumerate(xbins):
                cells = ((np.arange(y0, y1)[:, None] * fw) + col[None, x0:x1]).reshape(-1)
                vals = flat[:, cells]
                k = vals.argmax(axis=1)
                arg[bi, :, py, px] = cells[k]
                out[bi, :, py, px] = vals[np.arange(c), k]

    def bw(g):
        gf = np.zeros(c * fh * fw)
        idx = arg + (np.arange(c) * fh * fw)[None, :, None, None]
        np.add.at(gf, idx.reshape(-1), g.reshape(-1))
        return (gf.reshape(c, fh, fw),)
    return record(out, (fmap,), bw)
