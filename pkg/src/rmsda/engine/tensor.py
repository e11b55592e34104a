"""Dense 4-D tensors and the reverse-mode gradient tape.

Every value in the library is a Tensor with layout (batch, channels,
height, width); scalars are (1, 1, 1, 1). Operations executed while a
GradTape is active append one node each; GradTape.backward replays the
nodes in reverse and accumulates vector-Jacobian products into a map
keyed by tensor uid.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

_uid_counter = itertools.count(1)
_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["GradTape"]:
    """The innermost tape currently recording on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A rank-4 float array plus a unique identity used by the tape.

    data is float32 by default; float64 is supported throughout for
    high-precision checks. Operations never mutate their inputs; the
    only sanctioned in-place writes are optimizer parameter updates and
    batch-norm running statistics, which happen outside any tape.
    """

    __slots__ = ("data", "uid")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (B, N, L, K); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"tensor dimensions must be positive; got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.uid = next(_uid_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @classmethod
    def scalar(cls, value, dtype=np.float32) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), value, dtype=dtype))

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor; got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, uid={self.uid})"


class TapeNode:
    __slots__ = ("op", "inputs", "out_uid", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], out_uid: int,
                 backward: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.out_uid = out_uid
        self.backward = backward


class GradTape:
    """Records primitive operations for reverse-mode differentiation.

    Use as a context manager around the forward computation, then call
    backward(loss) with the scalar output. Tapes may nest; recording
    goes to the innermost active tape only.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable) -> None:
        """Append a node. backward maps the output gradient to one gradient
        (array or None) per input, in order."""
        self.nodes.append(TapeNode(op, inputs, output.uid, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(tensor) for every tensor on the tape.

        loss must be (1, 1, 1, 1). Returns {tensor.uid: gradient array};
        tensors the loss does not depend on are absent from the map.
        """
        if loss.shape != (1, 1, 1, 1):
            raise ContractError(
                f"backward starts from a scalar; got shape {loss.shape}"
            )
        grads: dict[int, np.ndarray] = {
            loss.uid: np.ones((1, 1, 1, 1), dtype=loss.dtype)
        }
        for node in reversed(self.nodes):
            gout = grads.get(node.out_uid)
            if gout is None:
                continue
            gins = node.backward(gout)
            if len(gins) != len(node.inputs):
                raise ContractError(
                    f"{node.op}: backward returned {len(gins)} gradients "
                    f"for {len(node.inputs)} inputs"
                )
            for tensor, gin in zip(node.inputs, gins):
                if gin is None:
                    continue
                if gin.shape != tensor.shape:
                    raise ContractError(
                        f"{node.op}: gradient shape {gin.shape} does not match "
                        f"input shape {tensor.shape}"
                    )
                held = grads.get(tensor.uid)
                grads[tensor.uid] = gin if held is None else held + gin
        return grads
