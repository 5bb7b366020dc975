"""Momentum SGD."""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], learning_rate: float,
             momentum: float = 0.0, velocity: Optional[Sequence[np.ndarray]] = None,
             names: Optional[Sequence[str]] = None):
    """One momentum-SGD update, ``v = momentum*v + g; p = p - lr*v``.

    Returns ``(new_params, new_velocity)``; inputs are not modified.
    """
    if not learning_rate > 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if velocity is None:
        velocity = [np.zeros_like(np.asarray(p, dtype=float)) for p in params]
    new_params, new_velocity = [], []
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        g = np.asarray(g, dtype=float)
        if not np.isfinite(g).all():
            label = names[i] if names is not None else f"#{i}"
            raise NonFiniteError(f"non-finite gradient for parameter {label}")
        v = momentum * np.asarray(v, dtype=float) + g
        new_params.append(np.asarray(p, dtype=float) - learning_rate * v)
        new_velocity.append(v)
    return new_params, new_velocity


class SGD:
    """Stateful wrapper around :func:`sgd_step` updating tensors in place."""

    def __init__(self, params: Iterable[Tensor], learning_rate: float, momentum: float = 0.0):
        self.params: List[Tensor] = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        live = [p for p in self.params if p.grad is not None]
        if not live:
            return
        vel = [self._velocity.get(id(p), np.zeros_like(p.data)) for p in live]
        new_p, new_v = sgd_step([p.data for p in live], [p.grad for p in live],
                                self.learning_rate, self.momentum, vel,
                                names=[p.name or f"#{i}" for i, p in enumerate(live)])
        for p, d, v in zip(live, new_p, new_v):
            p.data = d
            self._velocity[id(p)] = v
