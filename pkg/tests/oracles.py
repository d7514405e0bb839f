"""Slow, loop-based reference implementations used as independent oracles."""

import math

import numpy as np


def conv2d_direct(x, w, b=None, stride=1, pad=0, groups=1):
    n, c, h, wd = x.shape
    co, cg, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    per = co // groups
    for b_ in range(n):
        for o in range(co):
            gi = o // per
            for y in range(ho):
                for x_ in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for i in range(k):
                            for j in range(k):
                                acc += w[o, ci, i, j] * xp[b_, gi * cg + ci, y * stride + i, x_ * stride + j]
                    out[b_, o, y, x_] = acc + (0.0 if b is None else b[o])
    return out


def pool_direct(x, k, stride, reduce):
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for a in range(n):
        for ch in range(c):
            for y in range(ho):
                for x_ in range(wo):
                    out[a, ch, y, x_] = reduce(x[a, ch, y * stride:y * stride + k, x_ * stride:x_ * stride + k])
    return out


def keys(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def resize_1d_scalar(v, n_out, kernel=keys, antialias=True):
    """Half-pixel-centred resampling of one row, clamped at the edges, weights renormalised."""
    n_in = len(v)
    scale = n_in / n_out
    support = scale if (antialias and scale > 1) else 1.0
    out = []
    for i in range(n_out):
        centre = (i + 0.5) * scale - 0.5
        lo, hi = math.floor(centre - 2 * support) - 1, math.ceil(centre + 2 * support) + 1
        num = den = 0.0
        for j in range(lo, hi + 1):
            wgt = kernel((j - centre) / support)
            num += wgt * v[min(max(j, 0), n_in - 1)]
            den += wgt
        out.append(num / den)
    return np.array(out)


def resize_2d_scalar(img, out_h, out_w, **kw):
    rows = np.array([resize_1d_scalar(r, out_w, **kw) for r in img])
    return np.array([resize_1d_scalar(c, out_h, **kw) for c in rows.T]).T


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def ssim_direct(x, y, size=11, sigma=1.5):
    """SSIM with explicit per-window weighted statistics."""
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    win = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            a, b = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            ma, mb = (win * a).sum(), (win * b).sum()
            va, vb = (win * (a - ma) ** 2).sum(), (win * (b - mb) ** 2).sum()
            cov = (win * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        up = f()
        flat[i] = o - h
        down = f()
        flat[i] = o
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


SHIFT_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def sparse_shift_kernel(w1, n_kept):
    """Embed a pointwise weight (o, c) into the 3x3 kernel that performs shift-then-1x1."""
    o, c = w1.shape
    m = (c - n_kept) // 8
    w3 = np.zeros((o, c, 3, 3), dtype=w1.dtype)
    w3[:, :n_kept, 1, 1] = w1[:, :n_kept]
    for g, (dy, dx) in enumerate(SHIFT_OFFSETS):
        sl = slice(n_kept + g * m, n_kept + (g + 1) * m)
        w3[:, sl, 1 + dy, 1 + dx] = w1[:, sl]
    return w3
