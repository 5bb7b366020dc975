"""Pruning layers and the two-phase pruning step.

Each pruning layer stores real-valued weights ``P`` and a binary mask ``B``.
Phase 1 updates ``P`` of the active layer against the task loss plus a
sparsity term ``lambda1*|P|_1`` and a bipolar term
``lambda2*|P*(1-P)|_1``; phase 2 trains the ordinary weights with every
pruning layer replaced by its binary mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import tensor as T
from .optim import SGD, sgd_step
from .tensor import NonFiniteError, Tensor

if TYPE_CHECKING:
    from .network import AugmentedNetwork

TAU = 0.5


def init_pruning_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` pruning weights from N(mean=1, variance=0.01)."""
    if n < 1:
        raise ValueError(f"a pruning layer needs at least one channel, got {n}")
    return rng.normal(1.0, 0.1, size=n)


def binarize(p, tau: float = TAU) -> np.ndarray:
    """Strict threshold: 1.0 where ``p > tau`` else 0.0."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=float)
    return (p > tau).astype(float)


def sparsity_penalty(p) -> float:
    p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=float)
    return float(np.abs(p).sum())


def bipolar_penalty(p) -> float:
    p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=float)
    return float(np.abs(p * (1.0 - p)).sum())


@dataclass
class LossConfig:
    lambda1: float = 0.002
    lambda2: float = 0.002


def pruning_penalty(p: Tensor, cfg: LossConfig) -> Tensor:
    """``lambda1*sum|p| + lambda2*sum|p(1-p)|`` with sign(0) := 0 subgradients."""
    d = p.data
    q = d * (1.0 - d)
    value = cfg.lambda1 * np.abs(d).sum() + cfg.lambda2 * np.abs(q).sum()
    if not np.isfinite(value):
        raise NonFiniteError("non-finite pruning penalty")

    def backward(g):
        return (g * (cfg.lambda1 * np.sign(d) + cfg.lambda2 * (1.0 - 2.0 * d) * np.sign(q)),)

    return T.apply_op("pruning_penalty", np.asarray(value), (p,), backward)


def total_loss(task_loss, p, cfg: LossConfig) -> Tensor:
    """Task loss plus the pruning penalty of one or more ``P`` tensors."""
    task = task_loss if isinstance(task_loss, Tensor) else Tensor(task_loss)
    ps = p if isinstance(p, (list, tuple)) else [p]
    total = task
    for pt in ps:
        total = total + pruning_penalty(pt if isinstance(pt, Tensor) else Tensor(pt), cfg)
    return total


class PruningLayer:
    """Dual real/binary channel-selection weights for one prunable unit."""

    def __init__(self, name: str, p, sites: Sequence[str] = (), kind: str = "conv",
                 b=None, tau: float = TAU):
        self.name = name
        self.P = Tensor(np.asarray(p, dtype=float).copy(), name=f"{name}.P")
        self.B = np.ones(len(self.P.data)) if b is None else np.asarray(b, dtype=float).copy()
        self.sites = tuple(sites)
        self.kind = kind
        self.tau = tau
        if self.B.shape != self.P.shape:
            raise T.ShapeError(f"pruning layer {name}: mask length {self.B.shape} != {self.P.shape}")

    @property
    def channels(self) -> int:
        return self.P.shape[0]

    @property
    def shared(self) -> bool:
        return len(self.sites) > 1

    def refresh(self) -> np.ndarray:
        self.B = binarize(self.P.data, self.tau)
        return self.B

    def effective_mask(self) -> np.ndarray:
        """``B`` with the last-channel floor: an empty mask keeps the channel of maximal ``P``."""
        if self.B.any():
            return self.B
        m = np.zeros_like(self.B)
        m[int(np.argmax(self.P.data))] = 1.0
        return m

    def __repr__(self) -> str:
        return f"PruningLayer({self.name!r}, kept={int(self.B.sum())}/{self.channels})"


def schedule(step: int, update_frequency: int = 10) -> bool:
    """Whether phase 1 runs at ``step``; phase 2 runs at every step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if update_frequency < 1:
        raise ValueError("update_frequency must be >= 1")
    return step % update_frequency == 0


def batch_error(logits, labels) -> float:
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    return float(np.mean(logits.argmax(axis=1) != labels))


def phase1_step(aug: "AugmentedNetwork", x, y, active: str, cfg: LossConfig,
                learning_rate: float = 0.01) -> float:
    """Update ``P`` of the ``active`` pruning layer only, then re-binarize it.

    Every pruning layer applies its real ``P`` in this forward pass; network
    weights and BN running statistics are left untouched.
    """
    layer = aug.layers[active]
    net = aug.network
    was = net.training
    net.train()
    layer.P.requires_grad = True
    layer.P.grad = None
    try:
        with net.frozen():
            logits = aug.forward(x, "real", update_stats=False)
            loss = total_loss(T.softmax_cross_entropy(logits, y), layer.P, cfg)
            loss.backward()
        (new_p,), _ = sgd_step([layer.P.data], [layer.P.grad], learning_rate, 0.0,
                               names=[layer.P.name])
        layer.P.data = new_p
    finally:
        layer.P.grad = None
        layer.P.requires_grad = False
        net.train(was)
    layer.refresh()
    return loss.item()


@dataclass
class Phase2Result:
    loss: float
    error: float
    logits: np.ndarray


def phase2_step(aug: "AugmentedNetwork", x, y, optimizer: SGD) -> Phase2Result:
    """One training step of all network weights through the binary masks."""
    net = aug.network
    net.train()
    logits = aug.forward(x, "binary", update_stats=True)
    loss = T.softmax_cross_entropy(logits, y)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return Phase2Result(loss.item(), batch_error(logits, y), logits.data)
