"""Parameter bundles and helpers to walk them by name."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .ops import conv2d, linear
from .tensor import Tensor


def uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor
    stride: int = 1

    @classmethod
    def init(cls, rng: np.random.Generator, cin: int, cout: int, k: int, stride: int = 1) -> "Conv":
        fan_in = cin * k * k
        return cls(uniform(rng, fan_in, (cout, cin, k, k)), uniform(rng, fan_in, (cout,)), stride)

    @property
    def padding(self) -> int:
        return self.weight.shape[-1] // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding, self.bias)


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, cin: int, cout: int) -> "Linear":
        return cls(uniform(rng, cin, (cout, cin)), uniform(rng, cin, (cout,)))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def named_tensors(obj, prefix: str = "") -> Dict[str, Tensor]:
    """Flatten nested dataclasses / lists / dicts into ``{"a.b.0": Tensor}`` in field order."""
    out: Dict[str, Tensor] = {}

    def walk(o, name):
        if isinstance(o, Tensor):
            out[name] = o
        elif dataclasses.is_dataclass(o) and not isinstance(o, type):
            for f in dataclasses.fields(o):
                walk(getattr(o, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(o, (list, tuple)):
            for i, v in enumerate(o):
                walk(v, f"{name}.{i}" if name else str(i))
        elif isinstance(o, dict):
            for k, v in o.items():
                walk(v, f"{name}.{k}" if name else str(k))

    walk(obj, prefix)
    return out


def replace_tensors(obj, mapping: Dict[str, Tensor], prefix: str = ""):
    """Copy of ``obj`` with tensors swapped for ``mapping[name]`` where present."""

    def walk(o, name):
        if isinstance(o, Tensor):
            return mapping.get(name, o)
        if dataclasses.is_dataclass(o) and not isinstance(o, type):
            changes = {f.name: walk(getattr(o, f.name), f"{name}.{f.name}" if name else f.name)
                       for f in dataclasses.fields(o)}
            return dataclasses.replace(o, **changes)
        if isinstance(o, list):
            return [walk(v, f"{name}.{i}" if name else str(i)) for i, v in enumerate(o)]
        if isinstance(o, tuple):
            return tuple(walk(v, f"{name}.{i}" if name else str(i)) for i, v in enumerate(o))
        if isinstance(o, dict):
            return {k: walk(v, f"{name}.{k}" if name else str(k)) for k, v in o.items()}
        return o

    return walk(obj, prefix)
