from fractions import Fraction

import numpy as np
import pytest

from sgglc import ops, sgt
from sgglc.config import ConfigError, ModelConfig
from sgglc.model import (CheckpointError, build, checkpoint_config, count_multiply_adds, count_params, forward,
                         load_checkpoint, mac_breakdown, model_stats, param_breakdown, save_checkpoint)
from sgglc.tensor import Tensor, no_grad


def run(cfg, params, h, w, rng, dtype=np.float64):
    lr = Tensor(rng.uniform(0, 1, (1, 3, h, w)).astype(dtype))
    prior = Tensor(rng.standard_normal((1, cfg.prior_channels, h, w)).astype(dtype)) if cfg.injection_indices else None
    return forward(lr, prior, params, cfg)


def test_same_seed_builds_identical_params():
    cfg = ModelConfig.tiny(3)
    a, b = build(cfg, 4), build(cfg, 4)
    assert a.names() == b.names()
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())
    assert not np.array_equal(build(cfg, 5)["head.weight"].data, a["head.weight"].data)


def test_invalid_configs():
    for kw in (dict(channels=7), dict(injection_indices=(9,)),
               dict(local_branch=False, global_branch=False), dict(shift_mode="dilated")):
        with pytest.raises(ConfigError):
            ModelConfig.tiny(2, **kw)
    with pytest.raises(ConfigError, match="scale"):
        ModelConfig.tiny(5)


def test_top_level_modules():
    assert list(param_breakdown(build(ModelConfig.tiny(2))).keys()) == ["head", "sgm", "glcm1", "glcm2", "tail"]


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_output_dims(f64, rng, scale):
    cfg = ModelConfig.tiny(scale)
    assert run(cfg, build(cfg, 0, np.float64), 9, 11, rng).shape == (1, 3, 9 * scale, 11 * scale)


def test_zero_tail_gives_zero_image(f64, rng):
    cfg = ModelConfig.tiny(2)
    params = build(cfg, 0, np.float64)
    params["tail.weight"].data[...] = 0
    assert np.array_equal(run(cfg, params, 8, 8, rng).data, np.zeros((1, 3, 16, 16)))


def test_bad_input_rank(f64):
    cfg = ModelConfig.tiny(2, injection_indices=())
    with pytest.raises(ValueError, match="LR input"):
        forward(Tensor(np.zeros((3, 8, 8))), None, build(cfg, 0, np.float64), cfg)


def test_head_param_count():
    params = build(ModelConfig.base(2))
    assert params["head.weight"].size + params["head.bias"].size == 48 * 3 * 9 + 48 == 1344
    assert param_breakdown(params)["head"] == 1344


def test_param_count_is_sum_of_modules():
    params = build(ModelConfig.tiny(2))
    assert count_params(params) == sum(param_breakdown(params).values()) == 10018


def _esa_correction(cfg, h, w):
    """Exact minus nominal ESA multiply-adds for the strided stages at an h x w LR grid."""
    f = cfg.esa_width
    dh, dw = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    k = min(7, dh, dw)
    ph, pw = (dh - k) // 3 + 1, (dw - k) // 3 + 1
    return 9 * f * f * (dh * dw + ph * pw) - Fraction(9 * f * f * h * w, 4) - Fraction(9 * f * f * h * w, 36)


@pytest.mark.parametrize("h,w", [(24, 24), (20, 28), (16, 40)])
def test_instrumented_count_matches_analytic(rng, h, w):
    cfg = ModelConfig.tiny(2)
    params = build(cfg, 0)
    with no_grad(), ops.count_macs() as tally:
        run(cfg, params, h, w, rng, np.float32)
    measured = tally["conv"] + tally["matmul"]
    hidden = cfg.channels // 4
    n_fab = 1 + 2 * len(cfg.injection_indices)
    # squeeze-excite style 1x1 convs act on pooled (1x1) maps and are left out of the per-pixel rates
    pooled = 2 * cfg.channels * hidden * (n_fab + cfg.n_glcm)
    expected = count_multiply_adds(cfg, 2 * h, 2 * w) + cfg.n_glcm * _esa_correction(cfg, h, w) + pooled
    assert measured == expected


def test_multiply_adds_scale_linearly_with_pixels():
    cfg = ModelConfig.base(2)
    one = count_multiply_adds(cfg, 720, 1280)
    assert count_multiply_adds(cfg, 1440, 2560) == 4 * one
    assert sum(mac_breakdown(cfg, 720, 1280).values()) == pytest.approx(one, abs=len(mac_breakdown(cfg, 1, 1)))


def test_model_stats_fields():
    s = model_stats(ModelConfig.tiny(2), 64, 64)
    assert s.param_count == 10018 and s.multiply_adds == count_multiply_adds(ModelConfig.tiny(2), 64, 64)
    assert s.published(ModelConfig.tiny(2)) is None
    assert model_stats(ModelConfig.base(3), 48, 48).published(ModelConfig.base(3)) == (497, 48.5)


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = ModelConfig.tiny(2)
    params = build(cfg, 3)
    save_checkpoint(params, tmp_path / "ck", cfg)
    back = load_checkpoint(tmp_path / "ck", cfg)
    assert all(np.array_equal(back[n].data, params[n].data) for n in params.names())
    assert checkpoint_config(tmp_path / "ck") == cfg
    sgt.zip_bundle(tmp_path / "ck", tmp_path / "ck.zip")
    assert np.array_equal(load_checkpoint(tmp_path / "ck.zip")["tail.bias"].data, params["tail.bias"].data)


def test_truncated_checkpoint(tmp_path):
    cfg = ModelConfig.tiny(2)
    save_checkpoint(build(cfg), tmp_path / "ck", cfg)
    f = tmp_path / "ck" / "head.weight.sgt"
    if not f.exists():
        f = sorted((tmp_path / "ck").glob("*.sgt"))[0]
    f.write_bytes(f.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck", cfg)


def test_checkpoint_scale_mismatch(tmp_path):
    save_checkpoint(build(ModelConfig.tiny(2)), tmp_path / "ck", ModelConfig.tiny(2))
    with pytest.raises(CheckpointError, match="tail"):
        load_checkpoint(tmp_path / "ck", ModelConfig.tiny(4))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing", ModelConfig.tiny(2))
