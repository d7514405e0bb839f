"""8-bit raster images: PPM/PGM/PNG I/O, color transforms, bicubic degradation and augmentation."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, no_grad, precision


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageBuffer:
    width: int
    height: int
    channels: int
    data: np.ndarray  # uint8, (height, width, channels)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.data.shape != (self.height, self.width, self.channels):
            raise ValueError(f"data shape {self.data.shape} != {(self.height, self.width, self.channels)}")

    @classmethod
    def from_array(cls, arr) -> "ImageBuffer":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"expected HxW or HxWxC array, got shape {arr.shape}")
        return cls(arr.shape[1], arr.shape[0], arr.shape[2], arr.astype(np.uint8))

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageBuffer) and np.array_equal(self.data, other.data)


# ---------------------------------------------------------------------------
# netpbm and PNG
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pnm(buf: bytes) -> ImageBuffer:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported netpbm magic {magic!r}")
    pos, fields = 2, []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise ImageFormatError("truncated netpbm header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ImageFormatError(f"bad netpbm header field: {exc}") from exc
    if not 0 < maxval <= 255:
        raise ImageFormatError(f"only 8-bit netpbm is supported (maxval {maxval})")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("truncated netpbm header")
    pos += 1
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    if len(buf) - pos < need:
        raise ImageFormatError(f"truncated pixel data: {len(buf) - pos} of {need} bytes")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    if maxval != 255:
        data = np.floor(data.astype(np.float64) * 255.0 / maxval + 0.5).astype(np.uint8)
    return ImageBuffer(w, h, c, data.copy())


def _encode_pnm(img: ImageBuffer) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    return magic + f"\n{img.width} {img.height}\n255\n".encode() + img.data.tobytes()


def load_image(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _load_png(path)
    return _parse_pnm(buf)


def _load_png(path) -> ImageBuffer:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is an optional extra
        raise ImageFormatError("PNG support needs Pillow (pip install 'artifact[png]')") from exc
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return ImageBuffer.from_array(np.array(im))


def save_image(img: ImageBuffer, path) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise ImageFormatError("PNG support needs Pillow") from exc
        arr = img.data[:, :, 0] if img.channels == 1 else img.data
        Image.fromarray(arr).save(path)
        return
    if ext not in (".ppm", ".pgm", ".pnm"):
        raise ImageFormatError(f"unsupported output format {ext!r}")
    with open(path, "wb") as fh:
        fh.write(_encode_pnm(img))


# ---------------------------------------------------------------------------
# conversions
# ---------------------------------------------------------------------------

def to_tensor(img: ImageBuffer, dtype=np.float32) -> Tensor:
    """(1, c, h, w) tensor scaled to [0, 1]."""
    return Tensor((img.data.transpose(2, 0, 1)[None] / 255.0).astype(dtype))


def quantize(x) -> np.ndarray:
    """Clamp a [0, 255]-domain array to 8 bits with round-half-up."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 255.0) + 0.5).astype(np.uint8)


def from_tensor(t: Tensor) -> ImageBuffer:
    """Inverse of :func:`to_tensor` for batch index 0, with clamping and rounding."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return ImageBuffer.from_array(quantize(data[0].transpose(1, 2, 0) * 255.0))


def rgb_to_y(img: ImageBuffer) -> Tensor:
    """BT.601 studio-swing luma in the [0, 255] domain, shape (1, 1, h, w), float64."""
    x = img.data.astype(np.float64)
    if img.channels == 1:
        y = x[:, :, 0]
    else:
        r, g, b = (x[:, :, i] / 255.0 for i in range(3))
        y = 16.0 + 65.481 * r + 128.553 * g + 24.966 * b
    return Tensor(y[None, None])


def crop_to_multiple(img: ImageBuffer, r: int) -> ImageBuffer:
    h, w = img.height - img.height % r, img.width - img.width % r
    return ImageBuffer.from_array(img.data[:h, :w])


def degrade_bicubic(hr: ImageBuffer, r: int) -> ImageBuffer:
    """Antialiased bicubic downscale by ``r``, rounded back to 8 bits."""
    if hr.height % r or hr.width % r:
        raise ValueError(f"image {hr.width}x{hr.height} not divisible by scale {r}; crop first")
    x = Tensor(hr.data.transpose(2, 0, 1)[None].astype(np.float64))
    with no_grad(), precision(np.float64):
        y = ops.bicubic_resize(x, hr.height // r, hr.width // r)
    return ImageBuffer.from_array(quantize(y.data[0].transpose(1, 2, 0)))


def _transform(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    a = np.rot90(a, k, axes=(0, 1))
    return np.ascontiguousarray(a[:, ::-1] if flip else a)


def augment(patch_hr: ImageBuffer, patch_lr: ImageBuffer, rng: np.random.Generator):
    """Apply one random rotation (multiple of 90 degrees) and optional horizontal flip to both."""
    k, flip = int(rng.integers(4)), bool(rng.integers(2))
    return (ImageBuffer.from_array(_transform(patch_hr.data, k, flip)),
            ImageBuffer.from_array(_transform(patch_lr.data, k, flip)))
