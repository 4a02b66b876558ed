from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor

GROUPS = ("visual_pre_roi", "visual_post_roi", "remainder")


class Parameter(Tensor):
    __slots__ = ("name", "group", "decay", "state")

    def __init__(self, data, name: str, group: str = "remainder", decay: bool = True):
        super().__init__(data, requires_grad=True)
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        self.name = name
        self.group = group
        self.decay = decay
        self.state: dict[str, np.ndarray | int] = {}


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ParameterStore:
    params: dict[str, Parameter] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, group: str = "remainder",
            decay: bool = True) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(np.array(value, dtype=np.float64), name, group, decay)
        self.params[name] = p
        return p

    def weight(self, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int,
               rng: np.random.Generator, group: str = "remainder") -> Parameter:
        return self.add(name, glorot_uniform(rng, shape, fan_in, fan_out), group, decay=True)

    def bias(self, name: str, size: int, group: str = "remainder") -> Parameter:
        return self.add(name, np.zeros(size), group, decay=False)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def group(self, *groups: str) -> list[Parameter]:
        return [p for p in self.params.values() if p.group in groups]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, groups: tuple[str, ...], flag: bool) -> None:
        for p in self.group(*groups):
            p.requires_grad = flag

    def n_values(self) -> int:
        return sum(p.data.size for p in self.params.values())
