"""Dense tensor with reverse-mode gradient recording.

A :class:`Tensor` wraps a numpy array. Operations that take tensors record
their parents and a backward closure while gradient recording is enabled;
:meth:`Tensor.backward` walks that record in reverse topological order.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = {
    "grad": True,
    "debug": os.environ.get("SGGLC_DEBUG", "") not in ("", "0"),
    "deterministic": False,
    "dtype": np.float32,
}

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable gradient recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_debug(flag: bool) -> None:
    """In debug mode every primitive raises on non-finite output."""
    _state["debug"] = bool(flag)


def is_debug() -> bool:
    return _state["debug"]


def set_deterministic(flag: bool) -> None:
    """Force fixed-order (sequential) reductions in convolution kernels."""
    _state["deterministic"] = bool(flag)


def is_deterministic() -> bool:
    return _state["deterministic"]


@contextlib.contextmanager
def deterministic(flag: bool = True) -> Iterator[None]:
    prev = _state["deterministic"]
    _state["deterministic"] = flag
    try:
        yield
    finally:
        _state["deterministic"] = prev


def default_dtype() -> type:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (e.g. ``np.float64`` for oracles)."""
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


class Tensor:
    """Floating-point array plus an optional gradient slot.

    Image tensors use NCHW layout. Intermediate tensors inside attention
    blocks may have other ranks.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    # -- construction -------------------------------------------------
    @classmethod
    def zeros(cls, *shape, requires_grad=False, dtype=None) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype or default_dtype()), requires_grad)

    @classmethod
    def ones(cls, *shape, requires_grad=False, dtype=None) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype or default_dtype()), requires_grad)

    # -- properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators (implemented in ops) --------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive")
        return ops.mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    # -- gradients ----------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor without a recorded forward graph")
        if seed is None:
            if self.data.size != 1:
                raise RuntimeError("seed gradient required for non-scalar output")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            raise ValueError(f"seed shape {seed.shape} != tensor shape {self.shape}")

        order = _topological(self)
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _raise_item():
    raise ValueError("item() needs a single-element tensor")


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op's output, recording the graph edge when any parent needs gradients."""
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite output")
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out
