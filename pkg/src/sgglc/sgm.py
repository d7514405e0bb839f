"""Semantic Guidance Module.

Prior features are fused with backbone features by a 1x1 convolution over
the channel concatenation, refined by a Feature Attention Block (FAB), and
coupled multiplicatively with a running prior stream ``P``::

    F_v0 = conv1x1([F_0, T])         P_1 = FAB(F_v0)
    F_vi = conv1x1([F_i, T])         F_i' = FAB(F_vi)
    out  = F_i' + F_i' * P_i         P_{i+1} = P_i + FAB(P_i)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .config import ModelConfig
from .params import ParameterStore, apply_conv, init_conv
from .tensor import Tensor


def init_fab(store: ParameterStore, name: str, c: int, reduction: int, rng: np.random.Generator) -> None:
    hidden = max(c // reduction, 1)
    init_conv(store, f"{name}.conv1", c, c, 3, rng)
    init_conv(store, f"{name}.conv2", c, c, 3, rng)
    init_conv(store, f"{name}.se_reduce", c, hidden, 1, rng)
    init_conv(store, f"{name}.se_expand", hidden, c, 1, rng)


def fab_forward(x: Tensor, store: ParameterStore, name: str) -> Tensor:
    """conv3x3 -> ReLU -> conv3x3 -> squeeze-excite gate, plus the input."""
    c = store[f"{name}.conv1.weight"].shape[1]
    if x.shape[1] != c:
        raise ValueError(f"{name}: expected {c} channels, got {x.shape[1]}")
    y = apply_conv(store, f"{name}.conv2", ops.relu(apply_conv(store, f"{name}.conv1", x)))
    s = ops.global_avg_pool(y)
    s = ops.relu(apply_conv(store, f"{name}.se_reduce", s))
    s = ops.sigmoid(apply_conv(store, f"{name}.se_expand", s))
    return x + y * s


def _fab(x: Tensor, store: ParameterStore, name: str, cfg: ModelConfig) -> Tensor:
    return fab_forward(x, store, name) if cfg.fab_enabled else x


@dataclass
class SgmState:
    prior_stream: Tensor
    fused_shallow: Tensor
    updates: int = 0


def init_sgm(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator, prefix: str = "sgm") -> None:
    c, cp = cfg.channels, cfg.prior_channels
    init_conv(store, f"{prefix}.fuse0", c + cp, c, 1, rng)
    if cfg.fab_enabled:
        init_fab(store, f"{prefix}.fab_p0", c, cfg.fab_reduction, rng)
    for idx in cfg.injection_indices:
        init_conv(store, f"{prefix}.inject{idx}.fuse", c + cp, c, 1, rng)
        if cfg.fab_enabled:
            init_fab(store, f"{prefix}.inject{idx}.fab_f", c, cfg.fab_reduction, rng)
            init_fab(store, f"{prefix}.inject{idx}.fab_p", c, cfg.fab_reduction, rng)


def _check_prior(f: Tensor, prior: Tensor, cfg: ModelConfig) -> None:
    if prior.shape[2:] != f.shape[2:]:
        raise ValueError(f"prior spatial dims {prior.shape[2:]} do not match features {f.shape[2:]}")
    if prior.shape[1] != cfg.prior_channels:
        raise ValueError(f"prior has {prior.shape[1]} channels, config expects {cfg.prior_channels}")
    if prior.shape[0] != f.shape[0]:
        raise ValueError(f"prior batch {prior.shape[0]} != feature batch {f.shape[0]}")


def sgm_init(f0: Tensor, prior: Tensor, store: ParameterStore, cfg: ModelConfig, prefix: str = "sgm") -> SgmState:
    _check_prior(f0, prior, cfg)
    fv0 = apply_conv(store, f"{prefix}.fuse0", ops.concat_channels([f0, prior]))
    return SgmState(prior_stream=_fab(fv0, store, f"{prefix}.fab_p0", cfg), fused_shallow=fv0)


def sgm_inject(f_i: Tensor, prior: Tensor, state: SgmState, store: ParameterStore, cfg: ModelConfig,
               index: int, prefix: str = "sgm") -> tuple:
    """Fuse the prior into ``f_i`` ahead of GLCM ``index``; returns ``(f_out, new_state)``."""
    if f_i.shape != state.prior_stream.shape:
        raise ValueError(f"feature dims {f_i.shape} != prior stream dims {state.prior_stream.shape}")
    _check_prior(f_i, prior, cfg)
    name = f"{prefix}.inject{index}"
    fv = apply_conv(store, f"{name}.fuse", ops.concat_channels([f_i, prior]))
    fi = _fab(fv, store, f"{name}.fab_f", cfg)
    p = state.prior_stream
    out = fi + fi * p
    p_next = p + _fab(p, store, f"{name}.fab_p", cfg)
    return out, SgmState(prior_stream=p_next, fused_shallow=state.fused_shallow, updates=state.updates + 1)
