"""Named learnable arrays (theta) and their initialisation."""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from typing import TYPE_CHECKING

import numpy as np

from modules.autograd import Tensor
from modules.exceptions import ShapeError

if TYPE_CHECKING:
    from modules.dtypes import FloatArray


class ModelParams(Mapping[str, Tensor]):
    """Insertion-ordered map from parameter name to Tensor."""

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, Tensor] | None = None) -> None:
        self._tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def add(self, name: str, data: FloatArray) -> Tensor:
        if name in self._tensors:
            msg = f"duplicate parameter name '{name}'"
            raise ValueError(msg)
        tensor = Tensor(data, requires_grad=True)
        self._tensors[name] = tensor
        return tensor

    def clone(self, *, requires_grad: bool = True) -> ModelParams:
        """Deep, tape-detached copy (used for the pi_old and pi_ref snapshots)."""
        return ModelParams(
            {name: Tensor(t.data.copy(), requires_grad=requires_grad) for name, t in self._tensors.items()},
        )

    def load_arrays(self, arrays: Mapping[str, FloatArray]) -> None:
        """Overwrite values in place; names and shapes must match exactly."""
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            msg = f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}"
            raise ShapeError(msg)
        for name, tensor in self._tensors.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                msg = f"parameter '{name}' has shape {value.shape}, expected {tensor.shape}"
                raise ShapeError(msg)
            tensor.data = value.copy()

    def arrays(self) -> dict[str, FloatArray]:
        return {name: t.data for name, t in self._tensors.items()}

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())
