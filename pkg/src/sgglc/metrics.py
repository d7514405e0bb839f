"""PSNR and SSIM on the luma channel with a border crop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .image import ImageBuffer, rgb_to_y
from .tensor import Tensor

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


def _plane(x, crop: int) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    a = a.reshape(a.shape[-2:]) if a.ndim > 2 else a
    if crop:
        if 2 * crop >= min(a.shape):
            raise ValueError(f"crop {crop} leaves nothing of a {a.shape} image")
        a = a[crop:-crop, crop:-crop]
    return a


def _pair(a, b, crop):
    shape_a = (a.data if isinstance(a, Tensor) else np.asarray(a)).shape
    shape_b = (b.data if isinstance(b, Tensor) else np.asarray(b)).shape
    if shape_a != shape_b:
        raise ValueError(f"dims differ: {shape_a} vs {shape_b}")
    return _plane(a, crop), _plane(b, crop)


def psnr(a, b, crop: int = 0) -> float:
    """Peak signal-to-noise ratio in dB for [0, 255]-domain single-channel images."""
    x, y = _pair(a, b, crop)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(a: np.ndarray, win: np.ndarray) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(a, win.shape)
    return np.einsum("ijkl,kl->ij", views, win)


def ssim(a, b, crop: int = 0) -> float:
    """Single-scale SSIM averaged over every fully contained Gaussian window."""
    x, y = _pair(a, b, crop)
    win = gaussian_window()
    if min(x.shape) < win.shape[0]:
        raise ValueError(f"image {x.shape} smaller than the {win.shape[0]}x{win.shape[0]} SSIM window")
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    crop_border: int

    def line(self, name: str = "", scale: int = 0) -> str:
        head = f"{name}  x{scale}  " if name else ""
        return f"{head}PSNR {self.psnr:.4f} dB  SSIM {self.ssim:.6f}  (crop {self.crop_border} px)"

    def record(self, name: str, scale: int) -> dict:
        return {"file": name, "scale": scale, "psnr_db": self.psnr, "ssim": self.ssim}


def evaluate(ref: ImageBuffer, test: ImageBuffer, scale: int) -> MetricReport:
    """Luma PSNR/SSIM with a ``scale``-pixel border crop."""
    if (ref.width, ref.height) != (test.width, test.height):
        raise ValueError(f"image dims differ: {ref.width}x{ref.height} vs {test.width}x{test.height}")
    ya, yb = rgb_to_y(ref), rgb_to_y(test)
    return MetricReport(psnr(ya, yb, scale), ssim(ya, yb, scale), scale)


def dumps_records(records) -> str:
    return json.dumps(list(records), indent=2, sort_keys=True)


def mean_report(reports) -> MetricReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    return MetricReport(float(np.mean([r.psnr for r in reports])), float(np.mean([r.ssim for r in reports])),
                        reports[0].crop_border)


__all__ = ["psnr", "ssim", "evaluate", "MetricReport", "gaussian_window", "mean_report", "dumps_records",
           "PSNR_CAP_DB"]
