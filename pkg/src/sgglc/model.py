"""End-to-end network assembly, parameter/multiply-add accounting and checkpoints.

Forward pass::

    F_0  = conv3x3(lr)
    F    = GLCM_n(... SGM-inject(GLCM_1(F_0)) ...)   # injections before configured GLCMs
    SR   = pixel_shuffle(conv3x3(F_0 + F), r)
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional

import numpy as np

from . import ops, sgt
from .config import ModelConfig
from .glcm import global_split, init_glcm, glcm_forward
from .params import ParameterStore, apply_conv, init_conv
from .prior import PriorMap
from .sgm import init_sgm, sgm_init, sgm_inject
from .tensor import Tensor, precision

# Published (params in K, multiply-adds in G at 1280x720 output) per (channels, scale).
PUBLISHED = {
    (48, 2): (490, 45.0), (48, 3): (497, 48.5), (48, 4): (506, 42.0),
    (64, 2): (870, 50.0), (64, 3): (856, 54.3), (64, 4): (868, 47.0),
}


def build(config: ModelConfig, rng_seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Allocate and initialize every parameter (Kaiming-uniform weights, zero biases)."""
    rng = np.random.default_rng(rng_seed)
    store = ParameterStore()
    c = config.channels
    with precision(dtype):
        init_conv(store, "head", 3, c, 3, rng)
        if config.injection_indices:
            init_sgm(store, config, rng)
        for i in range(1, config.n_glcm + 1):
            init_glcm(store, f"glcm{i}", config, rng)
        init_conv(store, "tail", c, 3 * config.scale ** 2, 3, rng)
    return store


def _prior_tensor(prior) -> Optional[Tensor]:
    if prior is None:
        return None
    return prior.features if isinstance(prior, PriorMap) else prior


def forward_features(lr: Tensor, prior, params: ParameterStore, config: ModelConfig) -> tuple:
    """Returns ``(F_0, deep_features, sgm_updates)``."""
    if lr.ndim != 4 or lr.shape[1] != 3:
        raise ValueError(f"expected LR input of shape (n, 3, h, w), got {lr.shape}")
    if min(lr.shape[2:]) < 1:
        raise ValueError("LR input has non-positive dims")
    t = _prior_tensor(prior)
    if config.injection_indices and t is None:
        raise ValueError("config injects semantic priors but no prior was supplied")
    f0 = apply_conv(params, "head", lr)
    state = sgm_init(f0, t, params, config) if config.injection_indices else None
    f = f0
    for i in range(1, config.n_glcm + 1):
        if i in config.injection_indices:
            f, state = sgm_inject(f, t, state, params, config, i)
        f = glcm_forward(f, params, f"glcm{i}", config)
    return f0, f, (state.updates if state else 0)


def forward(lr: Tensor, prior, params: ParameterStore, config: ModelConfig) -> Tensor:
    f0, deep, _ = forward_features(lr, prior, params, config)
    return ops.pixel_shuffle(apply_conv(params, "tail", f0 + deep), config.scale)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def count_params(params: ParameterStore) -> int:
    return params.numel(trainable_only=True)


def module_of(name: str) -> str:
    return name.split(".", 1)[0]


def param_breakdown(params: ParameterStore) -> "OrderedDict[str, int]":
    out: "OrderedDict[str, int]" = OrderedDict()
    for name, t in params.trainable():
        key = module_of(name)
        out[key] = out.get(key, 0) + t.size
    return out


def _conv_rate(c_in, c_out, k, groups=1) -> int:
    return c_out * (c_in // groups) * k * k


def mac_rates(config: ModelConfig) -> "OrderedDict[str, Fraction]":
    """Multiply-adds per LR pixel, by top-level module.

    Convolutions count ``c_out * c_in/groups * k^2`` per output pixel and
    attention counts its two matrix products. Strided stages inside ESA use
    their nominal rates (1/4 and 1/36 of the input grid), which keeps the
    total exactly linear in pixel count.
    """
    c, cp, r = config.channels, config.prior_channels, config.scale
    rates: "OrderedDict[str, Fraction]" = OrderedDict()
    rates["head"] = Fraction(_conv_rate(3, c, 3))

    def fab() -> int:
        if not config.fab_enabled:
            return 0
        return 2 * _conv_rate(c, c, 3)  # squeeze-excite acts on pooled 1x1 maps

    if config.injection_indices:
        per_fuse = _conv_rate(c + cp, c, 1)
        n_inj = len(config.injection_indices)
        rates["sgm"] = Fraction(per_fuse + fab() + n_inj * (per_fuse + 2 * fab()))

    c_local, c_global = config.branch_channels()
    gldeb = 0
    if c_local:
        gldeb += sum(_conv_rate(c_local, c_local, k, c_local) for k in ((1, 3, 5) if config.multipath else (1,)))
        sc_k = 3 if config.shift_mode == "conv3" else 1
        gldeb += 2 * _conv_rate(c_local, c_local, sc_k) + _conv_rate(c_local, c_local, 3)
    if c_global:
        g1 = global_split(c_global)[0]
        gldeb += _conv_rate(c_global, c_global, 1)
        tokens = config.window_size ** 2
        if config.spatial_attention:
            gldeb += 4 * g1 * g1 + 2 * tokens * g1
        if config.channel_attention:
            gldeb += 4 * g1 * g1 + 2 * g1 * g1
    gldeb += _conv_rate(c, c, 1)
    f = config.esa_width
    esa = (Fraction(_conv_rate(c, f, 1)) + Fraction(_conv_rate(f, f, 3), 4) + Fraction(_conv_rate(f, f, 3), 36)
           + _conv_rate(f, f, 1) + _conv_rate(f, c, 1))
    glcm = config.n_gldeb * gldeb + _conv_rate(c * config.n_gldeb, c, 1) + esa
    for i in range(1, config.n_glcm + 1):
        rates[f"glcm{i}"] = Fraction(glcm)
    rates["tail"] = Fraction(_conv_rate(c, 3 * r * r, 3))
    return rates


def count_multiply_adds(config: ModelConfig, out_h: int, out_w: int) -> int:
    lr_pixels = Fraction(out_h * out_w, config.scale ** 2)
    return int(round(sum(mac_rates(config).values()) * lr_pixels))


def mac_breakdown(config: ModelConfig, out_h: int, out_w: int) -> "OrderedDict[str, int]":
    lr_pixels = Fraction(out_h * out_w, config.scale ** 2)
    return OrderedDict((k, int(round(v * lr_pixels))) for k, v in mac_rates(config).items())


@dataclass
class ModelStats:
    param_count: int
    multiply_adds: int
    out_h: int
    out_w: int
    params_by_module: Dict[str, int]
    macs_by_module: Dict[str, int]

    def published(self, config: ModelConfig) -> Optional[tuple]:
        return PUBLISHED.get((config.channels, config.scale)) if _is_published_shape(config) else None


def _is_published_shape(config: ModelConfig) -> bool:
    ref = ModelConfig(scale=config.scale, channels=config.channels)
    return config == ref


def model_stats(config: ModelConfig, out_h: int = 720, out_w: int = 1280) -> ModelStats:
    params = build(config, 0)
    return ModelStats(count_params(params), count_multiply_adds(config, out_h, out_w), out_h, out_w,
                      dict(param_breakdown(params)), dict(mac_breakdown(config, out_h, out_w)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ParameterStore, path, config: Optional[ModelConfig] = None) -> None:
    extra = {"config": config.to_dict()} if config is not None else None
    sgt.save_bundle(params.arrays(), path, extra)


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> ParameterStore:
    """Load a checkpoint; with ``config`` the tensor set and dims must match that architecture."""
    try:
        arrays = sgt.load_bundle(path)
    except (FileNotFoundError, sgt.FormatError) as exc:
        raise CheckpointError(str(exc)) from exc
    if config is None:
        store = ParameterStore()
        for k, arr in arrays.items():
            store.add(k, arr)
        return store
    store = build(config, 0)
    try:
        store.load_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not fit config: {exc}") from exc
    return store


def checkpoint_config(path) -> Optional[ModelConfig]:
    manifest = sgt.read_manifest(path)
    cfg = manifest.get("config")
    return ModelConfig.from_dict(cfg) if cfg else None


__all__ = ["build", "forward", "forward_features", "count_params", "count_multiply_adds",
           "mac_breakdown", "param_breakdown", "model_stats", "ModelStats", "save_checkpoint",
           "load_checkpoint", "checkpoint_config", "CheckpointError", "PUBLISHED"]
