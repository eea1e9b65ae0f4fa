"""Ordered, named collection of trainable tensors and non-trainable buffers.

The store is the unit that federated aggregation averages and checkpoints
serialize, so iteration order is fixed (name-sorted) and identical on every
client and the server.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParameterStore:
    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add(self, name: str, data: np.ndarray, buffer: bool = False) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=not buffer)
        self._entries[name] = t
        if buffer:
            self._buffers.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def trainable_items(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.items():
            if name not in self._buffers:
                yield name, t

    def num_parameters(self, trainable_only: bool = True) -> int:
        return sum(
            t.size
            for n, t in self.items()
            if not (trainable_only and n in self._buffers)
        )

    def zero_grads(self):
        for _, t in self.trainable_items():
            t.zero_grad()

    def copy(self) -> "ParameterStore":
        """Deep copy; gradients are not carried over."""
        out = ParameterStore()
        for name, t in self.items():
            out.add(name, t.data.copy(), buffer=name in self._buffers)
        return out

    def compatible_with(self, other: "ParameterStore") -> str | None:
        """Return None when aggregation-compatible, else the first mismatch."""
        mine, theirs = self.names(), other.names()
        if mine != theirs:
            extra = sorted(set(mine).symmetric_difference(theirs))
            return f"name set mismatch, first differing entry {extra[0]!r}"
        for name in mine:
            a, b = self._entries[name], other._entries[name]
            if a.data.shape != b.data.shape:
                return (
                    f"shape mismatch for {name!r}: "
                    f"{a.data.shape} vs {b.data.shape}"
                )
            if (name in self._buffers) != other.is_buffer(name):
                return f"buffer/trainable mismatch for {name!r}"
        return None

    def allclose(self, other: "ParameterStore", **kw) -> bool:
        return self.compatible_with(other) is None and all(
            np.allclose(t.data, other[n].data, **kw) for n, t in self.items()
        )

    def equal(self, other: "ParameterStore") -> bool:
        return self.compatible_with(other) is None and all(
            np.array_equal(t.data, other[n].data) for n, t in self.items()
        )
