"""Parameter containers and small layer helpers shared by actor and critic."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamSet:
    """Ordered, named collection of trainable tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((prefix + k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, arrays, prefix: str = "") -> None:
        for k, t in self._params.items():
            arr = np.asarray(arrays[prefix + k])
            if arr.shape != t.shape:
                raise ValueError(f"{prefix + k}: shape mismatch {list(arr.shape)} vs {t.dims}")
            t.data = arr.astype(np.float64, copy=True)

    def copy_from(self, other: "ParamSet") -> None:
        for k, t in self._params.items():
            t.data = other[k].data.copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)
