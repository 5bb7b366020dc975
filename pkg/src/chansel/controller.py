"""Cost-aware Pruning/Restoring state machine.

The controller tracks an exponential moving average of the batch training
error. While pruning, crossing ``c_p * E_base`` flips the sign of
``lambda1`` and switches to restoring; while restoring, dropping below
``c_r * E_base`` finishes the layer.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

logger = logging.getLogger(__name__)

MIN_BASELINE = 1e-3


class State(str, enum.Enum):
    START = "start"
    PRUNING = "pruning"
    RESTORING = "restoring"
    END = "end"


class Directive(str, enum.Enum):
    CONTINUE_PRUNING = "continue_pruning"
    CONTINUE_RESTORING = "continue_restoring"
    LAYER_DONE = "layer_done"


class ControllerError(RuntimeError):
    pass


def compute_baseline(network, dataset) -> float:
    """Mean 0/1 training error of ``network`` over all of ``dataset``, in eval mode."""
    from .metrics import evaluate_error

    if len(dataset) == 0:
        raise ValueError("cannot compute a baseline error on an empty dataset")
    return evaluate_error(network, dataset.x, dataset.y)


def ema_update(e_ema: float, batch_error: float, alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return (1.0 - alpha) * e_ema + alpha * batch_error


@dataclass
class TraceRow:
    step: int
    state: State
    e_ema: float
    lambda1: float
    directive: Directive


@dataclass
class CostController:
    """Per-layer Pruning -> Restoring -> End controller.

    ``e_base`` below ``min_base`` is replaced by ``min_base`` so the
    thresholds stay meaningful for near-perfect baselines. ``e_ema`` starts
    at the (guarded) baseline and is carried over between layers.
    """

    e_base: float
    alpha: float = 0.05
    c_p: float = 4.0
    c_r: float = 2.0
    lambda1: float = 0.002
    max_pruning_steps: int = 2000
    max_restoring_steps: int = 2000
    min_base: float = MIN_BASELINE
    e_ema: Optional[float] = None
    state: State = State.START
    layer: Optional[str] = None
    steps: int = 0
    state_steps: int = 0
    forced_restore: bool = False
    budget_exhausted: bool = False
    flips: int = 0
    trace: List[TraceRow] = field(default_factory=list)

    def __post_init__(self):
        if not self.c_p > self.c_r >= 1.0:
            raise ValueError(f"need c_p > c_r >= 1, got c_p={self.c_p}, c_r={self.c_r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.e_base < 0:
            raise ValueError("e_base must be non-negative")
        self.raw_e_base = self.e_base
        if self.e_base < self.min_base:
            logger.info("baseline error %.4g below %.0e, using %.0e", self.e_base,
                        self.min_base, self.min_base)
            self.e_base = self.min_base
        self.magnitude = abs(self.lambda1)
        self.lambda1 = self.magnitude
        if self.e_ema is None:
            self.e_ema = self.e_base

    @property
    def prune_limit(self) -> float:
        return self.c_p * self.e_base

    @property
    def restore_target(self) -> float:
        return self.c_r * self.e_base

    def begin_layer(self, layer: Optional[str] = None) -> "CostController":
        self.state = State.PRUNING
        self.layer = layer
        self.lambda1 = self.magnitude
        self.steps = 0
        self.state_steps = 0
        self.forced_restore = False
        self.budget_exhausted = False
        return self

    def _to_restoring(self, forced: bool) -> None:
        self.lambda1 = -self.lambda1
        self.flips += 1
        self.state = State.RESTORING
        self.state_steps = 0
        self.forced_restore = forced
        if forced:
            logger.warning("layer %s: pruning budget of %d steps spent, restoring anyway",
                           self.layer, self.max_pruning_steps)

    def advance(self, batch_error: float) -> Directive:
        if self.state not in (State.PRUNING, State.RESTORING):
            raise ControllerError(f"advance() called in state {self.state.value}; call begin_layer() first")
        self.e_ema = ema_update(self.e_ema, batch_error, self.alpha)
        self.steps += 1
        self.state_steps += 1
        if self.state is State.PRUNING:
            if self.e_ema > self.prune_limit:
                self._to_restoring(forced=False)
            elif self.state_steps >= self.max_pruning_steps:
                self._to_restoring(forced=True)
            directive = (Directive.CONTINUE_RESTORING if self.state is State.RESTORING
                         else Directive.CONTINUE_PRUNING)
        elif self.e_ema < self.restore_target:
            self.state = State.END
            directive = Directive.LAYER_DONE
        elif self.state_steps >= self.max_restoring_steps:
            self.state = State.END
            self.budget_exhausted = True
            logger.warning("layer %s: restoring budget of %d steps spent, target %.4g not reached",
                           self.layer, self.max_restoring_steps, self.restore_target)
            directive = Directive.LAYER_DONE
        else:
            directive = Directive.CONTINUE_RESTORING
        self.trace.append(TraceRow(self.steps, self.state, self.e_ema, self.lambda1, directive))
        return directive


def replay(errors: Iterable[float], **config) -> CostController:
    """Feed a scripted batch-error trace through a single-layer controller.

    Stops at the first ``LAYER_DONE``; the returned controller carries the trace.
    """
    ctrl = CostController(**config).begin_layer("replay")
    for e in errors:
        if ctrl.advance(e) is Directive.LAYER_DONE:
            break
    return ctrl
