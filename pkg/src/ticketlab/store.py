"""Ordered named-parameter container shared by the model, pruning and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np


@dataclass(frozen=True)
class ParamRole:
    prunable: bool
    output_layer: bool = False


class NamedTensorStore:
    """Insertion-ordered ``name -> ndarray`` mapping with a role per entry."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._roles: dict[str, ParamRole] = {}

    def add(self, name: str, array: np.ndarray, prunable: bool, output_layer: bool = False) -> None:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._arrays[name] = array
        self._roles[name] = ParamRole(prunable, output_layer)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        if array.shape != self._arrays[name].shape:
            raise ValueError(f"{name}: shape {array.shape} != {self._arrays[name].shape}")
        self._arrays[name] = array

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def role(self, name: str) -> ParamRole:
        return self._roles[name]

    def prunable_names(self) -> list[str]:
        return [n for n in self._arrays if self._roles[n].prunable]

    def output_layer_names(self) -> list[str]:
        return [n for n in self._arrays if self._roles[n].output_layer]

    def total_count(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def prunable_count(self) -> int:
        return sum(self._arrays[n].size for n in self.prunable_names())

    def copy(self, dtype=None) -> "NamedTensorStore":
        out = NamedTensorStore()
        for n, a in self._arrays.items():
            r = self._roles[n]
            out.add(n, a.astype(dtype) if dtype is not None else a.copy(), r.prunable, r.output_layer)
        return out

    def bit_equal(self, other: "NamedTensorStore") -> bool:
        if self.names() != other.names():
            return False
        return all(
            a.dtype == other[n].dtype and a.shape == other[n].shape
            and a.tobytes() == other[n].tobytes()
            for n, a in self._arrays.items()
        )
