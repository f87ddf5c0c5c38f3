"""
Dense 64-bit tensors with reverse-mode differentiation.

Ops are recorded on the active :class:`Tape` only when at least one input
requires a gradient; outside a tape every op is a plain numpy computation.
A forward/backward pass owns its tape::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    tape.backward(loss)
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from sfim.errors import NonFiniteError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("sfim_active_tape", default=None)
_BLOCK_PATH: ContextVar[Tuple[str, ...]] = ContextVar("sfim_block_path", default=())


class Tensor:
    """Dense value in row-major order; features are laid out (N,) C, H, W."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the implementations live in sfim.ops
    def __add__(self, other):
        from sfim import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from sfim import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from sfim import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from sfim import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from sfim import ops

        return ops.div(self, other)

    def __neg__(self):
        from sfim import ops

        return ops.neg(self)


@dataclass(eq=False)
class ComplexTensor:
    """Complex value stored as two real tensors of identical shape."""

    real: Tensor
    imag: Tensor

    def __post_init__(self) -> None:
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real part {self.real.shape} and imaginary part {self.imag.shape} differ")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.real.shape

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data

    def conj(self) -> "ComplexTensor":
        from sfim import ops

        return ComplexTensor(self.real, ops.neg(self.imag))

    def __mul__(self, other: Union["ComplexTensor", Tensor]) -> "ComplexTensor":
        from sfim import ops

        if isinstance(other, ComplexTensor):
            real = ops.sub(ops.mul(self.real, other.real), ops.mul(self.imag, other.imag))
            imag = ops.add(ops.mul(self.real, other.imag), ops.mul(self.imag, other.real))
            return ComplexTensor(real, imag)
        return ComplexTensor(ops.mul(self.real, other), ops.mul(self.imag, other))

    def abs(self) -> Tensor:
        from sfim import ops

        return ops.complex_abs(self.real, self.imag)

    def angle(self) -> Tensor:
        from sfim import ops

        return ops.complex_angle(self.real, self.imag)


@dataclass(eq=False)
class Node:
    op: str
    index: int
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    tape: "Tape"


class Tape:
    """Ordered record of op nodes for one forward/backward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, fn: BackwardFn) -> Node:
        node = Node(op=op, index=len(self.nodes), inputs=inputs, output=output, backward=fn, tape=self)
        self.nodes.append(node)
        output._node = node
        return node

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise ShapeError("loss was not produced through ops recorded on this tape")

        pending: dict[int, np.ndarray] = {loss._node.index: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._node.index + 1]):
            upstream = pending.pop(node.index, None)
            if upstream is None:
                continue
            grads = node.backward(upstream)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(f"{node.op}: gradient shape {grad.shape} != input shape {tensor.shape}")
                parent = tensor._node
                if parent is None:
                    tensor.grad = tensor.grad + grad if tensor.grad is not None else grad.copy()
                else:
                    assert parent.index < node.index, "tape is not in topological order"
                    previous = pending.get(parent.index)
                    pending[parent.index] = grad if previous is None else previous + grad


def current_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf on the path to ``loss``."""
    if loss._node is None:
        raise ShapeError("loss was not produced through recorded ops")
    loss._node.tape.backward(loss)


@contextmanager
def block_scope(name: str) -> Iterator[None]:
    """Names the block being evaluated, so non-finite errors can say where."""
    token = _BLOCK_PATH.set(_BLOCK_PATH.get() + (name,))
    try:
        yield
    finally:
        _BLOCK_PATH.reset(token)


def block_path() -> str:
    return "/".join(_BLOCK_PATH.get())


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def apply_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    """Wrap a computed array as an op output, recording it when gradients flow."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op, block_path())
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, tuple(inputs), out, fn)
    return out


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
