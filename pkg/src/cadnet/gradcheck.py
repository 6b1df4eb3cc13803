"""Central finite-difference gradient checking (runs in float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_grad(
    fn: Callable[[], Tensor], t: Tensor, step: float = 1e-3, indices: Sequence[int] | None = None
) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. ``t`` (flat ``indices`` only, if given; others stay 0)."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn().data)
        flat[i] = orig - step
        lo = float(fn().data)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm; 0 when both vanish."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den < 1e-12 else float(num / den)


def check_grads(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Relative error of autodiff vs central differences for each input.

    ``inputs`` should be float64 leaves with ``requires_grad=True``; ``fn``
    rebuilds the scalar loss from them on every call. With ``max_coords``
    only that many randomly chosen coordinates per input are compared.
    """
    for t in inputs:
        t.grad = None
    T.backward(fn(), inputs)
    rng = rng or np.random.default_rng(0)
    errs = []
    for t in inputs:
        idx = None
        if max_coords is not None and t.data.size > max_coords:
            idx = np.sort(rng.choice(t.data.size, size=max_coords, replace=False))
        numeric = numerical_grad(fn, t, step, idx)
        analytic = t.grad.reshape(-1) if idx is None else t.grad.reshape(-1)[idx]
        errs.append(relative_error(analytic, numeric.reshape(-1) if idx is None else numeric.reshape(-1)[idx]))
    return errs


def as_f64_params(module) -> list[Tensor]:
    """Cast every parameter of ``module`` to float64 in place (for gradient checks)."""
    params = []
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
        params.append(p)
    return params
