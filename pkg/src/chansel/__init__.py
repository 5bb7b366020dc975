"""Progressive channel pruning with real/binary pruning layers and a cost-aware controller."""

from .controller import CostController, Directive, State, compute_baseline, ema_update, replay
from .harness import RunConfig, compare_strategies, layer_order, run_pruning, train_baseline
from .metrics import cost_profile, count_flops, count_params, evaluate_error
from .network import AugmentedNetwork, Network, NetworkSpec, augment, build
from .pruning import LossConfig, PruningLayer, phase1_step, phase2_step, schedule, total_loss
from .serialize import load_model, save_model
from .surgery import MaskPlan, apply_mask_surgery, validate

__all__ = [
    "AugmentedNetwork", "CostController", "Directive", "LossConfig", "MaskPlan", "Network",
    "NetworkSpec", "PruningLayer", "RunConfig", "State", "apply_mask_surgery", "augment", "build",
    "compare_strategies", "compute_baseline", "cost_profile", "count_flops", "count_params",
    "ema_update", "evaluate_error", "layer_order", "load_model", "phase1_step", "phase2_step",
    "replay", "run_pruning", "save_model", "schedule", "total_loss", "train_baseline", "validate",
]
__version__ = "0.1.0"
