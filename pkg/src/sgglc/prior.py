"""Semantic prior supply: precomputed SGT1 feature files or a frozen VGG-style extractor.

The extractor runs the VGG19 stages up to ``conv4_2`` (pre-activation) on an
ImageNet-normalized copy of the LR image and bilinearly upsamples the 1/8-grid
features back to LR resolution. Real ImageNet weights are an external
artifact; they are loaded from an SGT1 bundle whose tensor names follow
:func:`vgg_layout`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops, sgt
from .params import ParameterStore, kaiming_uniform
from .tensor import Tensor, no_grad, precision

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VGG19_WIDTHS = (64, 128, 256, 512)
# convs per stage up to conv4_2; a 2x2 max-pool closes each of the first three stages
_STAGE_CONVS = (2, 2, 4, 2)


@dataclass
class PriorMap:
    features: Tensor
    source: str = "file"

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def hw(self) -> Tuple[int, int]:
        return self.features.shape[2:]


def vgg_layout(widths: Sequence[int] = VGG19_WIDTHS) -> List[Tuple[str, int, int]]:
    """Ordered ``(name, c_in, c_out)`` for each 3x3 conv up to conv4_2."""
    layers, c_in = [], 3
    for stage, (n_conv, width) in enumerate(zip(_STAGE_CONVS, widths), start=1):
        for j in range(1, n_conv + 1):
            layers.append((f"conv{stage}_{j}", c_in, width))
            c_in = width
    return layers


@dataclass
class VggSlice:
    params: ParameterStore
    widths: Tuple[int, ...] = VGG19_WIDTHS
    frozen: bool = field(default=True)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def serialize(self) -> bytes:
        return b"".join(sgt.encode(t.data) for _, t in self.params.items())


def freeze(vgg: VggSlice) -> VggSlice:
    vgg.params.freeze()
    vgg.frozen = True
    return vgg


def random_vgg(seed: int = 0, widths: Sequence[int] = VGG19_WIDTHS, dtype=np.float32) -> VggSlice:
    """Fixed-seed Kaiming-initialized stand-in for pretrained weights."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    with precision(dtype):
        for name, c_in, c_out in vgg_layout(widths):
            store.add(f"{name}.weight", kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9), trainable=False)
            store.add(f"{name}.bias", np.zeros(c_out, dtype=dtype), trainable=False)
    return freeze(VggSlice(store, tuple(widths)))


def load_vgg(path, widths: Optional[Sequence[int]] = None) -> VggSlice:
    """Load weights from an SGT1 bundle; widths are inferred from the tensors when omitted."""
    arrays = sgt.load_bundle(path)
    if widths is None:
        try:
            widths = tuple(arrays[f"conv{s}_1.weight"].shape[0] for s in range(1, 5))
        except KeyError as exc:
            raise ValueError(f"VGG bundle missing {exc.args[0]}") from exc
    store = ParameterStore()
    for name, c_in, c_out in vgg_layout(widths):
        for part, shape in (("weight", (c_out, c_in, 3, 3)), ("bias", (c_out,))):
            key = f"{name}.{part}"
            if key not in arrays:
                raise ValueError(f"VGG bundle missing {key}")
            if arrays[key].shape != shape:
                raise ValueError(f"{key}: dims {arrays[key].shape}, expected {shape}")
            store.add(key, arrays[key], trainable=False)
    return freeze(VggSlice(store, tuple(widths)))


def save_vgg(vgg: VggSlice, path) -> None:
    sgt.save_bundle(vgg.params.arrays(), path)


def vgg_features(x: Tensor, vgg: VggSlice) -> Tensor:
    """conv4_2 pre-activation features for an NCHW batch of [0, 1] RGB images."""
    if len(vgg.params) == 0:
        raise ValueError("VGG slice has no weights loaded")
    dt = vgg.params["conv1_1.weight"].dtype
    mean = np.asarray(IMAGENET_MEAN, dtype=dt)[None, :, None, None]
    std = np.asarray(IMAGENET_STD, dtype=dt)[None, :, None, None]
    h = Tensor(((x.data.astype(dt) - mean) / std).astype(dt))
    layers = vgg_layout(vgg.widths)
    with no_grad():
        for idx, (name, _, _) in enumerate(layers):
            p = ops.ConvParams(vgg.params[f"{name}.weight"], vgg.params[f"{name}.bias"])
            h = ops.conv2d(h, p)
            if idx == len(layers) - 1:
                break
            h = ops.relu(h)
            nxt = layers[idx + 1][0]
            if nxt.endswith("_1"):
                h = ops.max_pool_strided(h, 2, 2)
    return h


def extract_prior_tensor(x: Tensor, vgg: VggSlice) -> PriorMap:
    hh, ww = x.shape[2:]
    if hh < 8 or ww < 8:
        raise ValueError(f"LR image {hh}x{ww} too small for the 1/8-grid extractor")
    with no_grad():
        feats = ops.bilinear_resize(vgg_features(x, vgg), hh, ww)
    return PriorMap(Tensor(feats.data.astype(x.dtype)), source="extractor")


def extract_prior(img_lr, vgg: VggSlice) -> PriorMap:
    """Prior for an 8-bit RGB :class:`~sgglc.image.ImageBuffer`."""
    from .image import to_tensor

    if img_lr.channels != 3:
        raise ValueError("extractor needs an RGB image")
    return extract_prior_tensor(to_tensor(img_lr, dtype=vgg.params["conv1_1.weight"].dtype), vgg)


def load_prior(path, expected_hw: Tuple[int, int], channels: Optional[int] = None) -> PriorMap:
    """Read a prior file; a coarser grid is bilinearly upsampled to ``expected_hw``."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    arr = sgt.read(path)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise sgt.FormatError(f"prior must be rank 3 or 4, got rank {arr.ndim}")
    if channels is not None and arr.shape[1] != channels:
        raise ValueError(f"prior has {arr.shape[1]} channels, config expects {channels}")
    t = Tensor(arr)
    h, w = expected_hw
    if arr.shape[2:] != (h, w):
        if arr.shape[2] > h or arr.shape[3] > w:
            raise ValueError(f"prior grid {arr.shape[2:]} is larger than LR dims {(h, w)}")
        with no_grad():
            t = ops.bilinear_resize(t, h, w)
    return PriorMap(t, source="file")


def save_prior(prior: PriorMap, path) -> None:
    sgt.write(path, prior.features.data)
