"""Tensor value type and the recording tape used for reverse-mode differentiation.

Ops only record onto a tape while one is active::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    tape.backward(loss)

Outside a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_DTYPE = np.float32
MAX_RANK = 5


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class ConfigError(ValueError):
    """A configuration value makes the requested computation impossible."""


class NumericalError(ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""


class Tensor:
    """Dense row-major float array with an optional gradient buffer.

    Leaves created by users default to float32. Op results keep the numpy
    result dtype, so promoting the leaves to float64 promotes a whole graph
    (the finite-difference checker relies on that).
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=DEFAULT_DTYPE):
        arr = np.array(data, dtype=dtype)
        _check_value(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Build an op result without copying or re-casting."""
        _check_value(arr)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t._tape = None
        return t

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"

    # operator sugar; the real implementations live in smanet.ops
    def __add__(self, other):
        from smanet import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from smanet import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from smanet import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from smanet import ops
        return ops.mul(self, -1.0)


def _check_value(arr: np.ndarray) -> None:
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    if 0 in arr.shape:
        raise ShapeError(f"zero-size dimension in {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value in tensor of dims {arr.shape}")


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "out", "saved")

    def __init__(self, op: str, inputs: tuple, out: Tensor, saved: dict):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.saved = saved


# op name -> rule(node, grad_out) returning one gradient (or None) per input
BACKWARD_RULES: dict[str, Callable] = {}


def backward_rule(op: str):
    def register(fn):
        BACKWARD_RULES[op] = fn
        return fn
    return register


_ACTIVE: list["Tape"] = []


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, op: str, inputs: tuple, out: Tensor, saved: dict) -> None:
        node = Node(op, inputs, out, saved)
        out.requires_grad = True
        out._node = node
        out._tape = self
        self.nodes.append(node)

    def backward(self, root: Tensor) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Leaf gradients accumulate across calls on different tapes; zero
        them between optimizer steps.
        """
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got dims {root.dims}")
        if root._tape is not self:
            raise ValueError("root was not produced on this tape")
        if self.consumed:
            raise RuntimeError("backward already ran on this tape; record a new forward pass")
        self.consumed = True

        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = BACKWARD_RULES[node.op](node, g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad += ig.astype(inp.grad.dtype, copy=False)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig


def backward(tape: Tape, root: Tensor) -> None:
    tape.backward(root)


def record(op: str, inputs: tuple, out: np.ndarray, **saved) -> Tensor:
    """Wrap ``out`` and put it on the active tape when any input needs grad."""
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(isinstance(i, Tensor) and i.requires_grad for i in inputs):
        tape.record(op, inputs, t, saved)
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
