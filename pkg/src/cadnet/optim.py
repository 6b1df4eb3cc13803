"""SGD with classic (heavy-ball) momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be a finite non-negative float, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


class MissingGradError(RuntimeError):
    pass


def sgd_step(
    params: Mapping[str, Tensor],
    config: SgdConfig,
    buffers: dict[str, np.ndarray],
) -> None:
    """One update: ``buf = momentum * buf + grad + wd * p``; ``p -= lr * buf``.

    ``buffers`` holds the momentum state keyed by parameter name and is
    updated in place (a missing entry starts from zero).
    """
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    for name, p in params.items():
        step = p.grad
        if config.weight_decay:
            step = step + config.weight_decay * p.data
        buf = buffers.get(name)
        if buf is not None and config.momentum:
            step = config.momentum * buf + step
        buffers[name] = np.asarray(step, dtype=p.data.dtype)
        if config.learning_rate:
            p.data -= config.learning_rate * buffers[name]


class SGD:
    """Named parameter group plus its momentum buffers."""

    def __init__(self, params: Mapping[str, Tensor], config: SgdConfig):
        self.params = dict(params)
        self.config = config
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, only_with_grad: bool = False) -> None:
        params = self.params
        if only_with_grad:
            params = {k: p for k, p in params.items() if p.grad is not None}
        sgd_step(params, self.config, self.buffers)
