"""Global-Local Collaborative Module.

A GLCM normalizes its input, runs a chain of GLDEBs (each splitting channels
between a convolutional local branch and a self-attention global branch),
fuses the GLDEB outputs with a 1x1 convolution and gates the result with a
hybrid CCA + ESA attention before the residual add::

    z_0 = LN(f);  z_k = GLDEB_k(z_{k-1})
    F   = conv1x1([z_1, ..., z_K])
    out = f + sigmoid(CCA(F) + ESA(F)) * F
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .config import ModelConfig
from .params import ParameterStore, apply_conv, apply_layer_norm, init_conv, init_layer_norm
from .tensor import Tensor

CCA_EPS = 1e-12
ESA_POOL = 7
ESA_POOL_STRIDE = 3


# ---------------------------------------------------------------------------
# ShiftConv
# ---------------------------------------------------------------------------

@dataclass
class ShiftConvParams:
    """Channel-group shift followed by a pointwise convolution.

    The first ``n_kept`` channels pass through unshifted; the remainder is cut
    into eight equal groups, each moved one pixel toward one neighbor.
    """

    n_kept: int
    conv: ops.ConvParams


def shift_conv(x: Tensor, p: ShiftConvParams) -> Tensor:
    if p.conv.k != 1:
        raise ValueError("ShiftConv uses a pointwise (1x1) convolution")
    return ops.conv2d(ops.shift_groups(x, p.n_kept), p.conv)


def _init_sc(store, name, c, cfg, rng):
    k = 3 if cfg.shift_mode == "conv3" else 1
    init_conv(store, f"{name}.conv", c, c, k, rng)


def _apply_sc(store, name, x, cfg):
    if cfg.shift_mode == "shift":
        conv = ops.ConvParams(store[f"{name}.conv.weight"], store.get(f"{name}.conv.bias"))
        return shift_conv(x, ShiftConvParams(cfg.shift_kept(x.shape[1]), conv))
    return apply_conv(store, f"{name}.conv", x)


# ---------------------------------------------------------------------------
# local branch
# ---------------------------------------------------------------------------

def _kernel_sizes(cfg: ModelConfig) -> tuple:
    return (1, 3, 5) if cfg.multipath else (1,)


def init_local(store: ParameterStore, name: str, c: int, cfg: ModelConfig, rng) -> None:
    for k in _kernel_sizes(cfg):
        init_conv(store, f"{name}.dw{k}", c, c, k, rng, groups=c)
    _init_sc(store, f"{name}.sc_a", c, cfg, rng)
    _init_sc(store, f"{name}.sc_b", c, cfg, rng)
    init_conv(store, f"{name}.out", c, c, 3, rng)


def high_frequency(f: Tensor, pool: int) -> Tensor:
    """Input minus its pooled-then-bicubic-upsampled copy."""
    h, w = f.shape[2:]
    if h < pool or w < pool:
        raise ValueError(f"local branch input {h}x{w} smaller than pooling window {pool}")
    up = ops.bicubic_resize(ops.avg_pool(f, pool, pool), h, w)
    return f - up


def local_branch(f: Tensor, store: ParameterStore, name: str, cfg: ModelConfig) -> Tensor:
    c = f.shape[1]
    high = high_frequency(f, cfg.pool_size)
    multi = None
    for k in _kernel_sizes(cfg):
        y = apply_conv(store, f"{name}.dw{k}", high, groups=c)
        multi = y if multi is None else multi + y
    a = _apply_sc(store, f"{name}.sc_a", f, cfg)
    b = _apply_sc(store, f"{name}.sc_b", multi, cfg)
    return apply_conv(store, f"{name}.out", a * ops.sigmoid(b + f))


# ---------------------------------------------------------------------------
# OSA: windowed spatial attention then channel attention on the transposed tokens
# ---------------------------------------------------------------------------

@dataclass
class _Windows:
    n: int
    h: int
    w: int
    wh: int
    ww: int
    nh: int
    nw: int

    @property
    def tokens(self) -> int:
        return self.wh * self.ww


def window_geometry(n: int, h: int, w: int, window: int) -> _Windows:
    wh, ww = min(window, h), min(window, w)
    return _Windows(n, h, w, wh, ww, math.ceil(h / wh), math.ceil(w / ww))


def to_windows(x: Tensor, g: _Windows) -> Tensor:
    """(n, c, h, w) -> (n * windows, tokens, c), zero-padding ragged edges."""
    c = x.shape[1]
    x = ops.pad2d(x, 0, g.nh * g.wh - g.h, 0, g.nw * g.ww - g.w)
    x = ops.reshape(x, (g.n, c, g.nh, g.wh, g.nw, g.ww))
    x = ops.permute(x, (0, 2, 4, 3, 5, 1))
    return ops.reshape(x, (g.n * g.nh * g.nw, g.tokens, c))


def from_windows(t: Tensor, g: _Windows) -> Tensor:
    c = t.shape[-1]
    x = ops.reshape(t, (g.n, g.nh, g.nw, g.wh, g.ww, c))
    x = ops.permute(x, (0, 5, 1, 3, 2, 4))
    x = ops.reshape(x, (g.n, c, g.nh * g.wh, g.nw * g.ww))
    return ops.crop2d(x, g.h, g.w)


def valid_token_mask(g: _Windows) -> np.ndarray:
    """Bool (windows, 1, tokens): False where a token lies in edge padding."""
    valid = np.zeros((g.nh * g.wh, g.nw * g.ww), dtype=bool)
    valid[: g.h, : g.w] = True
    m = valid.reshape(g.nh, g.wh, g.nw, g.ww).transpose(0, 2, 1, 3).reshape(g.nh * g.nw, 1, g.tokens)
    return np.tile(m, (g.n, 1, 1))


def init_osa(store: ParameterStore, name: str, c: int, cfg: ModelConfig, rng) -> None:
    for stage, on in (("spatial", cfg.spatial_attention), ("channel", cfg.channel_attention)):
        if on:
            for proj in ("q", "k", "v", "proj"):
                init_conv(store, f"{name}.{stage}.{proj}", c, c, 1, rng)


def _qkv(store, prefix, x, g):
    return [to_windows(apply_conv(store, f"{prefix}.{p}", x), g) for p in ("q", "k", "v")]


def spatial_attention(x: Tensor, store: ParameterStore, prefix: str, window: int) -> Tensor:
    """Self-attention among pixel tokens of each window; padded keys are masked out."""
    n, c, h, w = x.shape
    g = window_geometry(n, h, w, window)
    q, k, v = _qkv(store, prefix, x, g)
    logits = ops.matmul(q, ops.transpose2d(k)) * (1.0 / math.sqrt(c))
    mask = valid_token_mask(g) if (g.nh * g.wh, g.nw * g.ww) != (h, w) else None
    attn = ops.softmax_lastdim(logits, mask)
    return from_windows(ops.matmul(attn, v), g)


def channel_attention(x: Tensor, store: ParameterStore, prefix: str, window: int) -> Tensor:
    """Self-attention among channel tokens of each window (the transposed token layout).

    Padded positions are zero in q and k, so they do not affect the channel affinities.
    """
    n, c, h, w = x.shape
    g = window_geometry(n, h, w, window)
    q, k, v = _qkv(store, prefix, x, g)
    qt, kt, vt = ops.transpose2d(q), ops.transpose2d(k), ops.transpose2d(v)
    logits = ops.matmul(qt, ops.transpose2d(kt)) * (1.0 / math.sqrt(g.tokens))
    attn = ops.softmax_lastdim(logits)
    return from_windows(ops.transpose2d(ops.matmul(attn, vt)), g)


def osa(x: Tensor, store: ParameterStore, name: str, cfg: ModelConfig) -> Tensor:
    if cfg.spatial_attention:
        x = x + apply_conv(store, f"{name}.spatial.proj", spatial_attention(x, store, f"{name}.spatial", cfg.window_size))
    if cfg.channel_attention:
        x = x + apply_conv(store, f"{name}.channel.proj", channel_attention(x, store, f"{name}.channel", cfg.window_size))
    return x


# ---------------------------------------------------------------------------
# global branch
# ---------------------------------------------------------------------------

def global_split(c: int) -> tuple:
    return c - c // 2, c // 2


def init_global(store: ParameterStore, name: str, c: int, cfg: ModelConfig, rng) -> None:
    init_conv(store, f"{name}.entry", c, c, 1, rng)
    init_osa(store, f"{name}.osa", global_split(c)[0], cfg, rng)


def global_branch(f: Tensor, store: ParameterStore, name: str, cfg: ModelConfig) -> Tensor:
    g1, g2 = ops.split_channels(apply_conv(store, f"{name}.entry", f), list(global_split(f.shape[1])))
    return ops.concat_channels([osa(g1, store, f"{name}.osa", cfg), g2])


# ---------------------------------------------------------------------------
# GLDEB
# ---------------------------------------------------------------------------

def init_gldeb(store: ParameterStore, name: str, cfg: ModelConfig, rng) -> None:
    c_local, c_global = cfg.branch_channels()
    if c_local:
        init_local(store, f"{name}.local", c_local, cfg, rng)
    if c_global:
        init_global(store, f"{name}.global", c_global, cfg, rng)
    init_conv(store, f"{name}.merge", cfg.channels, cfg.channels, 1, rng)


def gldeb_forward(x: Tensor, store: ParameterStore, name: str, cfg: ModelConfig) -> Tensor:
    c_local, c_global = cfg.branch_channels()
    if c_local and c_global:
        fl, fg = ops.split_channels(x, [c_local, c_global])
        y = ops.concat_channels([local_branch(fl, store, f"{name}.local", cfg),
                                 global_branch(fg, store, f"{name}.global", cfg)])
    elif c_local:
        y = local_branch(x, store, f"{name}.local", cfg)
    else:
        y = global_branch(x, store, f"{name}.global", cfg)
    return apply_conv(store, f"{name}.merge", y)


# ---------------------------------------------------------------------------
# hybrid attention: CCA + ESA
# ---------------------------------------------------------------------------

def init_cca(store: ParameterStore, name: str, c: int, reduction: int, rng) -> None:
    hidden = max(c // reduction, 1)
    init_conv(store, f"{name}.reduce", c, hidden, 1, rng)
    init_conv(store, f"{name}.expand", hidden, c, 1, rng)


def contrast(x: Tensor) -> Tensor:
    """Per-channel mean plus standard deviation, shape (n, c, 1, 1)."""
    mu = ops.mean(x, axis=(2, 3), keepdims=True)
    d = x - mu
    var = ops.mean(d * d, axis=(2, 3), keepdims=True)
    return mu + ops.sqrt(var + CCA_EPS)


def cca(x: Tensor, store: ParameterStore, name: str) -> Tensor:
    s = ops.relu(apply_conv(store, f"{name}.reduce", contrast(x)))
    return x * ops.sigmoid(apply_conv(store, f"{name}.expand", s))


def init_esa(store: ParameterStore, name: str, c: int, f: int, rng) -> None:
    init_conv(store, f"{name}.reduce", c, f, 1, rng)
    init_conv(store, f"{name}.down", f, f, 3, rng)
    init_conv(store, f"{name}.conv", f, f, 3, rng)
    init_conv(store, f"{name}.skip", f, f, 1, rng)
    init_conv(store, f"{name}.restore", f, c, 1, rng)


def esa_pool_window(h: int, w: int) -> int:
    """Max-pool window after the stride-2 conv, shrunk for small inputs."""
    return min(ESA_POOL, h, w)


def esa(x: Tensor, store: ParameterStore, name: str) -> Tensor:
    h, w = x.shape[2:]
    reduced = apply_conv(store, f"{name}.reduce", x)
    down = apply_conv(store, f"{name}.down", reduced, stride=2, padding=1)
    k = esa_pool_window(*down.shape[2:])
    pooled = ops.max_pool_strided(down, k, ESA_POOL_STRIDE)
    up = ops.bilinear_resize(apply_conv(store, f"{name}.conv", pooled), h, w)
    mask = ops.sigmoid(apply_conv(store, f"{name}.restore", up + apply_conv(store, f"{name}.skip", reduced)))
    return x * mask


# ---------------------------------------------------------------------------
# GLCM
# ---------------------------------------------------------------------------

def init_glcm(store: ParameterStore, name: str, cfg: ModelConfig, rng) -> None:
    c = cfg.channels
    init_layer_norm(store, f"{name}.ln", c)
    for k in range(1, cfg.n_gldeb + 1):
        init_gldeb(store, f"{name}.gldeb{k}", cfg, rng)
    init_conv(store, f"{name}.fusion", c * cfg.n_gldeb, c, 1, rng)
    init_cca(store, f"{name}.cca", c, cfg.cca_reduction, rng)
    init_esa(store, f"{name}.esa", c, cfg.esa_width, rng)


def glcm_forward(f: Tensor, store: ParameterStore, name: str, cfg: ModelConfig) -> Tensor:
    if f.shape[1] != cfg.channels:
        raise ValueError(f"{name}: expected {cfg.channels} channels, got {f.shape[1]}")
    z = apply_layer_norm(store, f"{name}.ln", f, cfg.ln_eps)
    outs = []
    for k in range(1, cfg.n_gldeb + 1):
        z = gldeb_forward(z, store, f"{name}.gldeb{k}", cfg)
        outs.append(z)
    fusion = apply_conv(store, f"{name}.fusion", ops.concat_channels(outs))
    gate = ops.sigmoid(cca(fusion, store, f"{name}.cca") + esa(fusion, store, f"{name}.esa"))
    return f + gate * fusion
