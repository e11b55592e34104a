"""Named parameter and buffer storage for models."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .engine.tensor import Tensor
from .errors import CheckpointMismatchError, ShapeError


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
               dtype=np.float32) -> np.ndarray:
    """He uniform draw: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Ordered registry of trainable parameters and non-trainable buffers.

    Registration order is the canonical order used by checkpoints, the
    optimizer, and the parameter count. Names are dotted paths like
    "enc1.conv3.w".
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, tuple[Tensor, bool]] = {}

    def param(self, name: str, array: np.ndarray) -> Tensor:
        return self._add(name, array, trainable=True)

    def buffer(self, name: str, array: np.ndarray) -> Tensor:
        return self._add(name, array, trainable=False)

    def _add(self, name: str, array: np.ndarray, trainable: bool) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype))
        self._entries[name] = (t, trainable)
        return t

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor, bool]]:
        for name, (t, trainable) in self._entries.items():
            yield name, t, trainable

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, (t, flag) in self._entries.items():
            if flag:
                yield name, t

    def n_scalars(self, trainable_only: bool = False) -> int:
        return sum(
            t.data.size
            for t, flag in self._entries.values()
            if flag or not trainable_only
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, (t, _) in self._entries.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values in place; the name sets and shapes must match exactly."""
        mine = set(self._entries)
        theirs = set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise CheckpointMismatchError(
                f"parameter sets differ; missing {missing[:5]}, unexpected {extra[:5]}"
            )
        for name, (t, _) in self._entries.items():
            src = arrays[name]
            if tuple(src.shape) != t.shape:
                raise CheckpointMismatchError(
                    f"{name}: stored shape {tuple(src.shape)} vs model {t.shape}"
                )
            np.copyto(t.data, src.astype(self.dtype, copy=False))

    def scaled_copy_into(self, other: "ParamStore") -> None:
        """Copy this store's values into another store (dtype converted)."""
        if self.names() != other.names():
            raise ShapeError("parameter stores have different layouts")
        for name, (t, _) in self._entries.items():
            np.copyto(other[name].data, t.data.astype(other.dtype))
