"""RMSProp and global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class RmsPropState:
    lr: float = 5e-4
    alpha: float = 0.99
    eps: float = 1e-5
    v: list[np.ndarray] = field(default_factory=list)


def rmsprop_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: RmsPropState,
) -> tuple[list[np.ndarray], RmsPropState]:
    """Pure update: returns new parameter arrays and a new state."""
    if len(params) != len(grads):
        raise ShapeError(f"rmsprop_step: {len(params)} params vs {len(grads)} grads")
    v_old = state.v or [np.zeros_like(p) for p in params]
    new_params, new_v = [], []
    for p, g, v in zip(params, grads, v_old):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(
                f"rmsprop_step: shape mismatch {list(p.shape)} vs {list(g.shape)} vs {list(v.shape)}"
            )
        v = state.alpha * v + (1.0 - state.alpha) * g * g
        new_v.append(v)
        new_params.append(p - state.lr * g / (np.sqrt(v) + state.eps))
    return new_params, RmsPropState(state.lr, state.alpha, state.eps, new_v)


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is None or max_norm <= 0 or total <= max_norm:
        return list(grads), total
    factor = max_norm / (total + 1e-12)
    return [g * factor for g in grads], total


class RMSProp:
    """In-place RMSProp over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, alpha: float = 0.99,
                 eps: float = 1e-5, max_grad_norm: float | None = 10.0):
        self.params = list(params)
        self.state = RmsPropState(lr, alpha, eps, [np.zeros_like(p.data) for p in self.params])
        self.max_grad_norm = max_grad_norm

    def step(self, grads: Sequence[np.ndarray]) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        grads, norm = clip_by_global_norm(grads, self.max_grad_norm)
        new, self.state = rmsprop_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d
        return norm
