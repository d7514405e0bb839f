"""Architecture hyperparameters."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Tuple


class ConfigError(ValueError):
    pass


SHIFT_MODES = ("shift", "conv1", "conv3")


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 2
    channels: int = 48
    n_glcm: int = 6
    n_gldeb: int = 3
    # 1-based GLCM indices whose *input* receives the semantic prior
    injection_indices: Tuple[int, ...] = (3, 5)
    prior_channels: int = 512
    fab_enabled: bool = True
    fab_reduction: int = 4
    # GLDEB ablation switches
    local_branch: bool = True
    global_branch: bool = True
    multipath: bool = True
    shift_mode: str = "shift"
    spatial_attention: bool = True
    channel_attention: bool = True
    kept_fraction: float = 1.0 / 3.0
    pool_size: int = 2
    window_size: int = 8
    cca_reduction: int = 4
    esa_channels: int = 0  # 0 -> channels // 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "injection_indices", tuple(sorted(set(int(i) for i in self.injection_indices))))
        self.validate()

    # -- presets -------------------------------------------------------
    @classmethod
    def base(cls, scale: int = 2, **kw) -> "ModelConfig":
        return cls(scale=scale, **kw)

    @classmethod
    def large(cls, scale: int = 2, **kw) -> "ModelConfig":
        return cls(scale=scale, channels=64, **kw)

    @classmethod
    def tiny(cls, scale: int = 2, **kw) -> "ModelConfig":
        opts = dict(scale=scale, channels=8, n_glcm=2, n_gldeb=2, injection_indices=(1, 2),
                    prior_channels=4, window_size=4)
        opts.update(kw)
        return cls(**opts)

    # -- derived -------------------------------------------------------
    @property
    def esa_width(self) -> int:
        return self.esa_channels or max(self.channels // 4, 1)

    def branch_channels(self) -> Tuple[int, int]:
        """Channels fed to (local, global); a disabled branch gets 0 and the other all."""
        c = self.channels
        if self.local_branch and self.global_branch:
            return c // 2, c - c // 2
        return (c, 0) if self.local_branch else (0, c)

    def shift_kept(self, c: int) -> int:
        """Unshifted channel count for a ShiftConv over ``c`` channels.

        The shifted remainder is rounded down to a multiple of 8 so it splits
        into eight equal direction groups.
        """
        rest = c - math.ceil(self.kept_fraction * c - 1e-9)
        return c - 8 * (rest // 8)

    def validate(self) -> None:
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.channels < 2 or self.channels % 2:
            raise ConfigError(f"channels must be a positive even number, got {self.channels}")
        if self.n_glcm < 1:
            raise ConfigError("model needs at least one GLCM")
        if self.n_gldeb < 1:
            raise ConfigError("a GLCM needs at least one GLDEB")
        bad = [i for i in self.injection_indices if not 1 <= i <= self.n_glcm]
        if bad:
            raise ConfigError(f"injection indices {bad} outside [1, {self.n_glcm}]")
        if self.injection_indices and self.prior_channels < 1:
            raise ConfigError("prior_channels must be positive when priors are injected")
        if not (self.local_branch or self.global_branch):
            raise ConfigError("at least one GLDEB branch must be enabled")
        if self.shift_mode not in SHIFT_MODES:
            raise ConfigError(f"shift_mode must be one of {SHIFT_MODES}")
        if not 0.0 <= self.kept_fraction <= 1.0:
            raise ConfigError("kept_fraction must lie in [0, 1]")
        for name in ("pool_size", "window_size", "cca_reduction", "fab_reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["injection_indices"] = list(self.injection_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)
