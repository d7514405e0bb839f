"""Differentiable primitives on :class:`~sgglc.tensor.Tensor`.

Every function here computes its forward result with numpy and registers a
backward closure through :func:`~sgglc.tensor.make_result`. Convolution and
pooling follow deep-learning conventions: cross-correlation, zero padding,
floor-mode output sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import resample
from .tensor import Tensor, as_tensor, is_deterministic, make_result

# Multiply-add tally, filled only while a counter is attached (see ``count_macs``).
_mac_counter: Optional[dict] = None


def _tally(tag: str, n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[tag] = _mac_counter.get(tag, 0) + int(n)


class count_macs:
    """Context manager that records multiply-adds of conv and matmul calls."""

    def __enter__(self) -> dict:
        global _mac_counter
        self._prev = _mac_counter
        _mac_counter = {}
        self.counts = _mac_counter
        return self.counts

    def __exit__(self, *exc) -> None:
        global _mac_counter
        _mac_counter = self._prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _pair(a, b) -> tuple:
    if isinstance(a, Tensor):
        return a, _coerce(b, a)
    if isinstance(b, Tensor):
        return _coerce(a, b), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = float(b)
        return make_result(a.data * a.dtype.type(s), (a,), lambda g: (g * s,), "scale")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def _sigmoid_grad(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_result(y, (x,), lambda g: (g * _sigmoid_grad(y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    s = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return make_result(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),), "permute")


def transpose2d(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    _tally("matmul", out.size * ad.shape[-1])

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (bool, broadcastable) marks allowed entries."""
    d = x.data
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    z = d - d.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def concat_channels(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty list")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward, "concat")


def split_channels(x: Tensor, parts, axis: int = 1) -> list:
    """Split along ``axis`` into ``parts`` equal pieces or the given list of sizes."""
    total = x.shape[axis]
    if isinstance(parts, int):
        if parts < 1 or total % parts:
            raise ValueError(f"cannot split {total} channels into {parts} equal parts")
        sizes = [total // parts] * parts
    else:
        sizes = list(parts)
        if np.sum(sizes) != total or min(sizes) < 0:
            raise ValueError(f"split sizes {sizes} do not cover {total} channels")
    outs, start = [], 0
    for s in sizes:
        outs.append(slice_axis(x, start, start + s, axis))
        start += s
    return outs


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_result(x.data[idx].copy(), (x,), backward, "slice")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the last two axes."""
    if top == bottom == left == right == 0:
        return x
    pads = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2:]

    def backward(g):
        return (g[..., top:top + h, left:left + w],)

    return make_result(np.pad(x.data, pads), (x,), backward, "pad")


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` region."""
    if x.shape[-2:] == (h, w):
        return x
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., :h, :w] = g
        return (full,)

    return make_result(x.data[..., :h, :w].copy(), (x,), backward, "crop")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: Optional[int] = None  # None means "same" for odd kernels at stride 1
    groups: int = 1

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def pad(self) -> int:
        return self.k // 2 if self.padding is None else self.padding


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return a
    out = np.zeros(a.shape[:2] + (a.shape[2] + 2 * pad, a.shape[3] + 2 * pad), dtype=a.dtype)
    out[:, :, pad:-pad, pad:-pad] = a
    return out


def _conv_out(n: int, k: int, pad: int, stride: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation, NCHW input, weight ``(c_out, c_in/groups, k, k)``."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    wt = p.weight
    c_out, cg, kh, kw = wt.shape
    g, s, pad = p.groups, p.stride, p.pad()
    if kh != kw:
        raise ValueError("only square kernels are supported")
    if c % g or c_out % g:
        raise ValueError(f"channels ({c} in, {c_out} out) not divisible by groups={g}")
    if c != cg * g:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {cg * g}")
    ho, wo = _conv_out(h, kh, pad, s), _conv_out(w, kw, pad, s)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d produces empty output from {h}x{w} (k={kh}, pad={pad}, stride={s})")
    _tally("conv", c_out * cg * kh * kw * ho * wo * n)

    xp = _pad_hw(x.data, pad)
    W = wt.data
    co_g = c_out // g
    det = is_deterministic()
    pointwise = kh == 1 and s == 1 and g == 1 and pad == 0

    def tap(arr, i, j):
        return arr[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    if det:
        out = _conv_sequential(xp, W, g, s, ho, wo)
    elif pointwise:
        out = np.matmul(W.reshape(c_out, c), xp.reshape(n, c, h * w)).reshape(n, c_out, h, w)
    elif cg == 1 and co_g == 1:
        out = np.zeros((n, c_out, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                out += W[None, :, 0, i, j, None, None] * tap(xp, i, j)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        out = np.empty((n, c_out, ho, wo), dtype=xp.dtype)
        for gi in range(g):
            wg = W[gi * co_g:(gi + 1) * co_g]
            xg = win[:, gi * cg:(gi + 1) * cg]
            r = np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, co_g
            out[:, gi * co_g:(gi + 1) * co_g] = r.transpose(0, 3, 1, 2)
    if p.bias is not None:
        out = out + p.bias.data[None, :, None, None]

    bias = p.bias

    def backward(gout):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        if pointwise:
            g2 = gout.reshape(n, c_out, h * w)
            if wt.requires_grad:
                gw = np.einsum("nop,ncp->oc", g2, xp.reshape(n, c, h * w)).reshape(W.shape)
            if x.requires_grad:
                gx = np.matmul(W.reshape(c_out, c).T, g2).reshape(n, c, h, w)
            return gx, gw, gb
        if wt.requires_grad:
            if cg == 1 and co_g == 1:
                gw = np.empty_like(W)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = (gout * tap(xp, i, j)).sum(axis=(0, 2, 3))
            else:
                win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
                gw = np.empty_like(W)
                for gi in range(g):
                    gg = gout[:, gi * co_g:(gi + 1) * co_g]
                    xg = win[:, gi * cg:(gi + 1) * cg]
                    gw[gi * co_g:(gi + 1) * co_g] = np.tensordot(gg, xg, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if cg == 1 and co_g == 1:
                for i in range(kh):
                    for j in range(kw):
                        tap(gxp, i, j)[...] += gout * W[None, :, 0, i, j, None, None]
            else:
                for gi in range(g):
                    gg = gout[:, gi * co_g:(gi + 1) * co_g]
                    wg = W[gi * co_g:(gi + 1) * co_g]
                    cols = np.tensordot(gg, wg, axes=([1], [0]))  # n, ho, wo, cg, kh, kw
                    cols = cols.transpose(0, 3, 1, 2, 4, 5)
                    sub = gxp[:, gi * cg:(gi + 1) * cg]
                    for i in range(kh):
                        for j in range(kw):
                            tap(sub, i, j)[...] += cols[..., i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    parents = (x, wt) if bias is None else (x, wt, bias)
    return make_result(out, parents, backward, "conv2d")


def _conv_sequential(xp, W, g, s, ho, wo):
    """Accumulate taps one at a time in (c_in, ki, kj) order.

    The fixed order makes results independent of BLAS blocking, so two
    kernels with the same nonzero taps give bit-identical output.
    """
    n = xp.shape[0]
    c_out, cg, kh, kw = W.shape
    co_g = c_out // g
    out = np.zeros((n, c_out, ho, wo), dtype=xp.dtype)
    for gi in range(g):
        o = slice(gi * co_g, (gi + 1) * co_g)
        for ci in range(cg):
            src = xp[:, gi * cg + ci]
            for i in range(kh):
                for j in range(kw):
                    wv = W[o, ci, i, j]
                    patch = src[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                    out[:, o] += wv[None, :, None, None] * patch[:, None]
    return out


def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """One filter per channel; ``p.groups`` must equal the channel count."""
    if p.groups != x.shape[1]:
        raise ValueError(f"depthwise conv needs groups == channels ({p.groups} != {x.shape[1]})")
    return conv2d(x, p)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _check_window(x: Tensor, k: int, stride: int) -> tuple:
    if x.ndim != 4:
        raise ValueError("pooling expects NCHW input")
    h, w = x.shape[2:]
    if k < 1 or stride < 1:
        raise ValueError("pool window and stride must be positive")
    if h < k or w < k:
        raise ValueError(f"pool window {k} larger than input {h}x{w}")
    return (h - k) // stride + 1, (w - k) // stride + 1


def avg_pool(x: Tensor, k: int, stride: int) -> Tensor:
    ho, wo = _check_window(x, k, stride)
    d = x.data

    def tap(arr, i, j):
        return arr[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]

    out = np.zeros(d.shape[:2] + (ho, wo), dtype=d.dtype)
    for i in range(k):
        for j in range(k):
            out += tap(d, i, j)
    out /= k * k

    def backward(g):
        gx = np.zeros_like(d)
        gs = g / (k * k)
        for i in range(k):
            for j in range(k):
                tap(gx, i, j)[...] += gs
        return (gx,)

    return make_result(out, (x,), backward, "avg_pool")


def max_pool_strided(x: Tensor, k: int, stride: int) -> Tensor:
    """Max over ``k x k`` windows; ties resolve to the first tap in raster order."""
    ho, wo = _check_window(x, k, stride)
    d = x.data
    win = sliding_window_view(d, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(win.shape[:4] + (k * k,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(d)
        for t in range(k * k):
            i, j = divmod(t, k)
            sel = arg == t
            if sel.any():
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * sel
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "max_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def resize(x: Tensor, out_h: int, out_w: int, kind: str = "bicubic", antialias: bool = True) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ah = resample.weight_matrix(h, out_h, kind, antialias).astype(x.dtype)
    aw = resample.weight_matrix(w, out_w, kind, antialias).astype(x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_result(out, (x,), backward, kind)


def bicubic_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Keys (a=-0.5) bicubic resize with antialiasing when shrinking."""
    return resize(x, out_h, out_w, "bicubic", antialias=True)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return resize(x, out_h, out_w, "bilinear", antialias=False)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def backward(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    n, c, H, W = x.shape
    if r < 1 or H % r or W % r:
        raise ValueError(f"pixel_unshuffle: {H}x{W} not divisible by r={r}")
    h, w = H // r, W // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def backward(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, H, W),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "pixel_unshuffle")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across channels at every spatial position, then apply a per-channel affine."""
    d = x.data
    mu = d.mean(axis=1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxh = g * gd
            gx = inv * (dxh - dxh.mean(axis=1, keepdims=True)
                        - xhat * (dxh * xhat).mean(axis=1, keepdims=True))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# shift
# ---------------------------------------------------------------------------

# Eight unit offsets (dy, dx); a channel in group d reads input[y + dy, x + dx].
SHIFT_DIRECTIONS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _shift_plane(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[..., y, x] = a[..., y + dy, x + dx], zero outside."""
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[..., yd, xd] = a[..., ys, xs]
    return out


def shift_groups(x: Tensor, n_kept: int) -> Tensor:
    """Leave the first ``n_kept`` channels alone; translate the rest in 8 equal groups."""
    c = x.shape[1]
    rest = c - n_kept
    if n_kept < 0 or rest < 0 or rest % 8:
        raise ValueError(f"{rest} shifted channels cannot form 8 equal groups")
    m = rest // 8
    d = x.data
    out = d.copy()
    for gi, (dy, dx) in enumerate(SHIFT_DIRECTIONS):
        sl = slice(n_kept + gi * m, n_kept + (gi + 1) * m)
        out[:, sl] = _shift_plane(d[:, sl], dy, dx)

    def backward(g):
        gx = g.copy()
        for gi, (dy, dx) in enumerate(SHIFT_DIRECTIONS):
            sl = slice(n_kept + gi * m, n_kept + (gi + 1) * m)
            gx[:, sl] = _shift_plane(g[:, sl], -dy, -dx)
        return (gx,)

    return make_result(out, (x,), backward, "shift")
