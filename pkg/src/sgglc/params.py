"""Named parameter storage and the layer helpers that read from it.

Layers are functional: ``init_*`` registers tensors under a dotted prefix,
``apply_*`` fetches them by name during the forward pass.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


class ParameterStore:
    """Ordered ``name -> Tensor`` map. ``Tensor.requires_grad`` is the trainable flag."""

    def __init__(self) -> None:
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.asarray(data).dtype), requires_grad=trainable, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def get(self, name: str) -> Optional[Tensor]:
        return self._tensors.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable(self) -> Iterator[Tuple[str, Tensor]]:
        return ((k, t) for k, t in self._tensors.items() if t.requires_grad)

    def freeze(self) -> None:
        for t in self._tensors.values():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def numel(self, trainable_only: bool = True) -> int:
        return int(sum(t.size for t in self._tensors.values() if t.requires_grad or not trainable_only))

    def arrays(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, t.data) for k, t in self._tensors.items())

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for k, t in self._tensors.items():
            out.add(k, t.data.astype(dtype), trainable=t.requires_grad)
        return out

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, t in self._tensors.items():
            out.add(k, t.data.copy(), trainable=t.requires_grad)
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Overwrite values in place; shapes must agree with the registered tensors."""
        missing = [k for k in self._tensors if k not in arrays]
        if strict and missing:
            raise KeyError(f"missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        extra = [k for k in arrays if k not in self._tensors]
        if strict and extra:
            raise KeyError(f"unexpected tensors: {extra[:5]}")
        for k, arr in arrays.items():
            if k not in self._tensors:
                continue
            t = self._tensors[k]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"{k}: dims {tuple(arr.shape)} do not match expected {t.shape}")
            t.data = np.asarray(arr, dtype=t.dtype).copy()


# ---------------------------------------------------------------------------
# layer helpers
# ---------------------------------------------------------------------------

# Leaky-ReLU slope used for the gain, as in the PyTorch convolution default; it
# gives bound 1/sqrt(fan_in), which keeps the deep residual stack at O(1) scale.
DEFAULT_SLOPE = math.sqrt(5.0)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, a: float = DEFAULT_SLOPE) -> np.ndarray:
    """Uniform draw in [-b, b] with b = gain * sqrt(3 / fan_in) and gain = sqrt(2 / (1 + a^2))."""
    bound = math.sqrt(2.0 / (1.0 + a * a)) * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


def init_conv(store: ParameterStore, name: str, c_in: int, c_out: int, k: int,
              rng: np.random.Generator, groups: int = 1, bias: bool = True) -> None:
    if c_in % groups or c_out % groups:
        raise ValueError(f"{name}: channels not divisible by groups")
    if k % 2 == 0:
        raise ValueError(f"{name}: kernel size must be odd")
    fan_in = (c_in // groups) * k * k
    store.add(f"{name}.weight", kaiming_uniform(rng, (c_out, c_in // groups, k, k), fan_in))
    if bias:
        store.add(f"{name}.bias", np.zeros(c_out, dtype=default_dtype()))


def apply_conv(store: ParameterStore, name: str, x: Tensor, stride: int = 1,
               padding: Optional[int] = None, groups: int = 1) -> Tensor:
    w = store[f"{name}.weight"]
    p = ops.ConvParams(w, store.get(f"{name}.bias"), stride=stride, padding=padding, groups=groups)
    return ops.conv2d(x, p)


def init_layer_norm(store: ParameterStore, name: str, c: int) -> None:
    store.add(f"{name}.gamma", np.ones(c, dtype=default_dtype()))
    store.add(f"{name}.beta", np.zeros(c, dtype=default_dtype()))


def apply_layer_norm(store: ParameterStore, name: str, x: Tensor, eps: float = 1e-6) -> Tensor:
    return ops.layer_norm(x, store[f"{name}.gamma"], store[f"{name}.beta"], eps)
