"""Separable resampling weights.

Each 1-D resize is a dense ``(n_out, n_in)`` matrix, so a 2-D resize is
``A_h @ x @ A_w.T``. Coordinates use half-pixel centers and out-of-range
taps are clamped to the nearest edge sample.
"""

from __future__ import annotations

import functools
import math

import numpy as np

KEYS_A = -0.5


def keys_cubic(t: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def triangle(t: np.ndarray) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    return np.maximum(0.0, 1.0 - t)


_KERNELS = {"bicubic": (keys_cubic, 2.0), "bilinear": (triangle, 1.0)}


@functools.lru_cache(maxsize=256)
def weight_matrix(n_in: int, n_out: int, kind: str = "bicubic", antialias: bool = True) -> np.ndarray:
    """Return the ``(n_out, n_in)`` float64 interpolation matrix.

    When ``antialias`` is set and the axis shrinks, the kernel is stretched
    by the scale factor so it acts as a low-pass filter. Rows are normalized
    to sum to one.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize needs positive sizes, got {n_in}->{n_out}")
    kernel, support = _KERNELS[kind]
    scale = n_in / n_out
    stretch = scale if (antialias and scale > 1.0) else 1.0
    radius = support * stretch
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = math.floor(center - radius)
        hi = math.ceil(center + radius)
        taps = np.arange(lo, hi + 1)
        w = kernel((taps - center) / stretch)
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
    mat /= mat.sum(axis=1, keepdims=True)
    mat.setflags(write=False)
    return mat
