"""Adam with selectable weight-decay coupling, and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .engine import ContractError, Tensor


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # True: AdamW-style shrinkage outside the moment estimates.
    # False: classic L2, folded into the gradient before the moments.
    decoupled: bool = True


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: Tensor) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), 0)


def adam_step(param: Tensor, state: AdamState, hp: AdamHyper) -> None:
    """Apply one bias-corrected Adam update to ``param`` in place."""
    if param.grad is None:
        raise ContractError(f"adam_step: parameter {param.name or ''} has no gradient")
    if state.m.shape != param.shape:
        raise ContractError(
            f"adam_step: moment shape {state.m.shape} does not match parameter {param.shape}"
        )
    g = param.grad
    if hp.weight_decay and not hp.decoupled:
        g = g + hp.weight_decay * param.data
    state.step += 1
    state.m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    state.v = hp.beta2 * state.v + (1.0 - hp.beta2) * (g * g)
    m_hat = state.m / (1.0 - hp.beta1**state.step)
    v_hat = state.v / (1.0 - hp.beta2**state.step)
    update = m_hat / (np.sqrt(v_hat) + hp.eps)
    if hp.weight_decay and hp.decoupled:
        update = update + hp.weight_decay * param.data
    param.data = param.data - hp.lr * update


@dataclass
class Adam:
    """Adam over a named set of parameters."""

    params: Mapping[str, Tensor]
    hyper: AdamHyper = field(default_factory=AdamHyper)
    state: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, p in self.params.items():
            self.state.setdefault(name, AdamState.zeros_like(p))

    def step(self) -> None:
        for name, p in self.params.items():
            adam_step(p, self.state[name], self.hyper)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm
