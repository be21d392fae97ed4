"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Tape, Tensor

# denominators are floored here so that near-zero gradients are judged on
# absolute error instead of blowing up the ratio
REL_FLOOR = 1e-6


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f().data)
        flat[i] = orig - h
        down = float(f().data)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = REL_FLOOR,
) -> dict[int, float]:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Returns the max relative error per tensor index.
    """
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    return {
        i: relative_error(a, numerical_gradient(f, t, h), floor)
        for i, (t, a) in enumerate(zip(tensors, analytic))
    }


def projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Turn a tensor-valued function into the scalar ``sum(out * R)`` for fixed random R."""
    from . import engine as E

    probe = {}

    def f():
        out = out_fn()
        if "r" not in probe:
            probe["r"] = Tensor(rng.normal(size=out.shape))
        return E.sum(E.mul(out, probe["r"]))

    return f
