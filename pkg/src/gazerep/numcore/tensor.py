"""Reverse-mode autodiff tensor.

A ``Tensor`` wraps a numpy array and, when produced by a differentiable
operation, remembers its parents and a closure that pushes the incoming
gradient back to them. ``Param`` is a named leaf whose gradient buffer
persists between backward passes (so repeated calls accumulate).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DisconnectedParamError(RuntimeError):
    """Raised when a parameter expected to receive gradient is unreachable."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        backprop(self, grad=grad)

    # -- arithmetic (defined in functional, bound here for convenience) --
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


class Param(Tensor):
    """Trainable leaf with a persistent gradient buffer.

    ``decay`` marks whether weight decay applies (convolution and linear
    weights yes; biases and normalization scale/shift no).
    """

    __slots__ = ("name", "decay")

    def __init__(self, value, name: str, decay: bool = True, requires_grad: bool = True, dtype=None):
        super().__init__(value, requires_grad=requires_grad, dtype=dtype)
        self.name = name
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backprop(
    loss: Tensor,
    params: Iterable[Param] | None = None,
    grad: np.ndarray | None = None,
    allow_unused: bool = False,
) -> None:
    """Populate ``.grad`` of every ``Param`` reachable from ``loss``.

    Param gradients accumulate across calls until ``zero_grad``. When
    ``params`` is given and ``allow_unused`` is false, a trainable param the
    loss does not depend on raises ``DisconnectedParamError`` naming it.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    order = _topo_order(loss) if loss.requires_grad else []
    if params is not None and not allow_unused:
        reached = {id(n) for n in order}
        missing = [p.name for p in params if p.requires_grad and id(p) not in reached]
        if missing:
            raise DisconnectedParamError(
                "loss does not depend on parameter(s): " + ", ".join(missing)
            )
    if not order:
        return
    # intermediate grads are transient
    for node in order:
        if not isinstance(node, Param):
            node.grad = None
    loss._accumulate(np.asarray(grad, dtype=loss.dtype))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        if not isinstance(node, Param):
            node.grad = None
