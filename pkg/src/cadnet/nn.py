"""Parameter containers and layers on top of :mod:`cadnet.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameters and child modules in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        p = T.parameter(value)
        self._params[name] = p
        return p

    def add_module(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def param(self, name: str, frozen: bool) -> Tensor:
        p = self._params[name]
        return T.detach(p) if frozen else p


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, slope: float = 0.2) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    return (rng.standard_normal(shape) * gain / np.sqrt(fan_in)).astype(T.DTYPE)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1, pad: int | None = None):
        super().__init__()
        self.cin, self.cout, self.kernel, self.stride = cin, cout, kernel, stride
        self.pad = kernel // 2 if pad is None else pad
        self.add_param("weight", kaiming(rng, (kernel, kernel, cin, cout), kernel * kernel * cin))
        self.add_param("bias", np.zeros(cout, dtype=T.DTYPE))

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        return T.conv2d(x, self.param("weight", frozen), self.param("bias", frozen), self.stride, self.pad)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.add_param("weight", kaiming(rng, (cin, cout), cin, slope=1.0))
        self.add_param("bias", np.zeros(cout, dtype=T.DTYPE))

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        return T.add(T.matmul(x, self.param("weight", frozen)), self.param("bias", frozen))
