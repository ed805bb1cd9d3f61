"""Named parameter storage with a per-parameter trainable flag."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor


class ParameterStore:
    """Maps parameter names to dense arrays plus a trainable flag each.

    Arrays are held by reference; optimizers update them in place, which is
    what keeps tied parameters (token embeddings / SPLADE vocabulary table)
    a single object.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self.values[name] = arr
        self.trainable[name] = bool(trainable)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.trainable.items() if t]

    def tensor(self, name: str) -> Tensor:
        return Tensor(self.values[name], requires_grad=self.trainable[name], name=name)

    def set_all_trainable(self, flag: bool) -> None:
        for n in self.trainable:
            self.trainable[n] = flag

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for n, v in self.values.items():
            out.values[n] = v.copy()
            out.trainable[n] = self.trainable[n]
        return out

    def astype(self, dtype) -> "ParameterStore":
        """Copy with every array cast to ``dtype`` (e.g. float32 for inference)."""
        out = ParameterStore()
        for n, v in self.values.items():
            out.values[n] = v.astype(dtype)
            out.trainable[n] = self.trainable[n]
        return out

    def remove(self, name: str) -> None:
        del self.values[name]
        del self.trainable[name]

    def equals(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(
            self.trainable[n] == other.trainable[n]
            and self.values[n].shape == other.values[n].shape
            and np.array_equal(self.values[n], other.values[n])
            for n in self.values
        )
