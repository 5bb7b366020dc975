"""End-to-end driver: baseline training, progressive pruning, surgery, fine-tuning.

Everything random is drawn from generators keyed on ``RunConfig.seed``, so two
runs with equal configs produce byte-identical logs, reports and model files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .architectures import get_spec
from .controller import CostController, Directive, compute_baseline
from .data import Dataset, load_dataset
from .metrics import FLOPS_CONVENTION, cost_profile, evaluate_error
from .network import RESIDUAL_MODES, AugmentedNetwork, Network, augment, build, init_weights
from .optim import SGD
from .pruning import LossConfig, phase1_step, phase2_step, schedule
from .serialize import save_model
from .surgery import MaskPlan, apply_mask_surgery, validate
from .tensor import NonFiniteError

logger = logging.getLogger(__name__)

ORDERINGS = ("forward", "backward", "interlaced")
RUNLOG_SCHEMA = 1
RUNLOG_FIELDS = ("schema_version", "layer_index", "layer", "step", "global_step", "phase", "state",
                 "e_ema", "lambda1_sign", "directive", "kept", "loss", "phase1_loss", "batch_error")

# stream ids for np.random.default_rng([seed, stream])
_TRAIN, _PRUNE, _INTER, _FINETUNE, _SUBSAMPLE, _P_INIT, _SCRATCH = range(7)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    spec: str = "toy4"
    dataset: str = "blobs"
    order: str = "forward"
    residual_mode: str = "within+between"
    lambda1: float = 0.002
    lambda2: float = 0.002
    c_p: float = 4.0
    c_r: float = 2.0
    alpha: float = 0.05
    update_frequency: int = 10
    sample_ratio: float = 1.0
    seed: int = 0
    batch_size: int = 32
    momentum: float = 0.9
    train_epochs: int = 30
    train_lr: float = 0.05
    prune_lr: float = 0.01
    p_lr: float = 25.0
    inter_epochs: int = 5
    inter_lr: float = 0.005
    finetune_epochs: int = 10
    finetune_lr: float = 0.02
    max_pruning_steps: int = 2000
    max_restoring_steps: int = 2000
    scratch: bool = False
    out: Optional[str] = None

    def validate(self) -> None:
        if self.order not in ORDERINGS:
            raise ConfigError(f"unknown ordering {self.order!r}; choose from {ORDERINGS}")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ConfigError(f"unknown residual mode {self.residual_mode!r}; choose from {RESIDUAL_MODES}")
        if not 0.0 < self.sample_ratio <= 1.0:
            raise ConfigError(f"sample ratio must lie in (0, 1], got {self.sample_ratio}")
        for name in ("train_lr", "prune_lr", "p_lr", "inter_lr", "finetune_lr", "alpha"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.alpha < 1:
            raise ConfigError("alpha must be below 1")
        if self.lambda2 < 0:
            raise ConfigError("lambda2 must be non-negative")
        if not self.c_p > self.c_r >= 1.0:
            raise ConfigError(f"need c_p > c_r >= 1, got c_p={self.c_p}, c_r={self.c_r}")
        if self.update_frequency < 1 or self.batch_size < 1:
            raise ConfigError("update_frequency and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def layer_order(n: int, strategy: str) -> List[int]:
    """1-based visiting order of ``n`` layers."""
    if n < 1:
        raise ConfigError("need at least one layer")
    if strategy == "forward":
        return list(range(1, n + 1))
    if strategy == "backward":
        return list(range(n, 0, -1))
    if strategy == "interlaced":
        lo, hi, out = 1, n, []
        while lo <= hi:
            out.append(lo)
            if hi != lo:
                out.append(hi)
            lo, hi = lo + 1, hi - 1
        return out
    raise ConfigError(f"unknown ordering {strategy!r}; choose from {ORDERINGS}")


# ---------------------------------------------------------------- training loops


def _step_decay(base_lr: float, epoch: int, epochs: int) -> float:
    if epochs >= 4 and epoch >= (3 * epochs) // 4:
        return base_lr * 0.01
    if epochs >= 2 and epoch >= epochs // 2:
        return base_lr * 0.1
    return base_lr


def _train_epochs(model, data: Dataset, epochs: int, lr: float, momentum: float, batch_size: int,
                  rng: np.random.Generator, decay: bool, keep_best: bool = False,
                  what: str = "training") -> List[float]:
    """SGD over ``epochs``; returns training error before training and after each epoch.

    With ``keep_best`` the weights of the lowest-error epoch (including the
    starting point) are restored at the end.
    """
    aug = model if isinstance(model, AugmentedNetwork) else None
    net = aug.network if aug else model
    opt = SGD(net.parameters(), lr, momentum)
    history = [evaluate_error(model, data.x, data.y)]
    best = (history[0], net.weights.copy() if keep_best else None)
    for epoch in range(epochs):
        opt.learning_rate = _step_decay(lr, epoch, epochs) if decay else lr
        net.train()
        for bi, (x, y) in enumerate(data.batches(batch_size, rng)):
            try:
                logits = aug.forward(x, "binary") if aug else net.forward(x)
                loss = T.softmax_cross_entropy(logits, y)
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{what} diverged at epoch {epoch}, batch {bi} "
                                       f"(lr={opt.learning_rate}): {exc}") from exc
        history.append(evaluate_error(model, data.x, data.y))
        if keep_best and history[-1] < best[0]:
            best = (history[-1], net.weights.copy())
    if keep_best and best[1] is not None:
        net.weights = best[1]
    return history


def train_baseline(cfg: RunConfig, data: Optional[Dataset] = None):
    """Train ``cfg.spec`` from scratch; returns ``(network, error_history)``."""
    data = data if data is not None else load_dataset(cfg.dataset)
    spec = get_spec(cfg.spec, num_classes=data.num_classes, input_shape=data.shape)
    net = build(spec, cfg.seed)
    history = _train_epochs(net, data, cfg.train_epochs, cfg.train_lr, cfg.momentum, cfg.batch_size,
                            _rng(cfg.seed, _TRAIN), decay=True, what="baseline training")
    net.eval()
    return net, history


# ---------------------------------------------------------------- pruning


@dataclass
class RunResult:
    pruned: Network
    augmented: AugmentedNetwork
    report: dict
    log: List[dict] = field(default_factory=list)

    def runlog_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RUNLOG_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.log)
        return buf.getvalue()

    def report_json(self) -> str:
        return json.dumps(self.report, indent=2, sort_keys=True)


def ordered_units(aug: AugmentedNetwork, strategy: str):
    """Within/plain units first, between-block groups second; each step ordered by ``strategy``."""
    units = aug.units()
    steps = [[u for u in units if u.kind != "between"], [u for u in units if u.kind == "between"]]
    out = []
    for group in steps:
        if group:
            out += [group[i - 1] for i in layer_order(len(group), strategy)]
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def _prune_units(cfg, aug, units, ctrl, loss_cfg, opt, stream, prune_set, log, layers_report):
    """Per-unit controller loop; appends to ``log`` and ``layers_report`` as it goes."""
    inter_rng = _rng(cfg.seed, _INTER)
    step = 0
    for li, unit in enumerate(units):
        ctrl.begin_layer(unit.name)
        layer = aug.layers[unit.name]
        start = step
        while True:
            x, y = next(stream)
            p_loss = ""
            phase = "2"
            try:
                if schedule(step, cfg.update_frequency):
                    loss_cfg.lambda1 = ctrl.lambda1
                    p_loss = _fmt(phase1_step(aug, x, y, unit.name, loss_cfg, cfg.p_lr))
                    phase = "1+2"
                res = phase2_step(aug, x, y, opt)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"pruning diverged at layer {unit.name}, step {step}: {exc}") from exc
            directive = ctrl.advance(res.error)
            log.append({"schema_version": RUNLOG_SCHEMA, "layer_index": li, "layer": unit.name,
                        "step": ctrl.steps, "global_step": step, "phase": phase,
                        "state": ctrl.state.value, "e_ema": _fmt(ctrl.e_ema),
                        "lambda1_sign": 1 if ctrl.lambda1 > 0 else -1, "directive": directive.value,
                        "kept": int(layer.B.sum()), "loss": _fmt(res.loss), "phase1_loss": p_loss,
                        "batch_error": _fmt(res.error)})
            step += 1
            if directive is Directive.LAYER_DONE:
                break
        if cfg.inter_epochs:
            _train_epochs(aug, prune_set, cfg.inter_epochs, cfg.inter_lr, cfg.momentum,
                          cfg.batch_size, inter_rng, decay=False, what=f"fine-tuning after {unit.name}")
        layers_report.append({"unit": unit.name, "kind": unit.kind, "channels": unit.channels,
                              "kept": int(layer.effective_mask().sum()),
                              "kept_raw": int(layer.B.sum()), "steps": step - start,
                              "forced_restore": ctrl.forced_restore,
                              "budget_exhausted": ctrl.budget_exhausted})
        logger.info("layer %s: kept %d/%d after %d steps", unit.name, layers_report[-1]["kept"],
                    unit.channels, step - start)


def run_pruning(cfg: RunConfig, baseline: Optional[Network] = None,
                data: Optional[Dataset] = None) -> RunResult:
    """Progressive cost-aware pruning of ``baseline`` (trained here if missing)."""
    cfg.validate()
    data = data if data is not None else load_dataset(cfg.dataset)
    if baseline is None:
        baseline, _ = train_baseline(cfg, data)
    base = baseline.copy()
    prune_set = data.subsample(cfg.sample_ratio, seed=cfg.seed * 1000 + _SUBSAMPLE)

    e_base = compute_baseline(base, data)
    base_cost = cost_profile(base)
    aug = augment(base, cfg.residual_mode, seed=int(_rng(cfg.seed, _P_INIT).integers(2**31)))
    ctrl = CostController(e_base, alpha=cfg.alpha, c_p=cfg.c_p, c_r=cfg.c_r, lambda1=cfg.lambda1,
                          max_pruning_steps=cfg.max_pruning_steps,
                          max_restoring_steps=cfg.max_restoring_steps)
    loss_cfg = LossConfig(cfg.lambda1, cfg.lambda2)
    opt = SGD(aug.network.parameters(), cfg.prune_lr, cfg.momentum)
    stream = prune_set.stream(cfg.batch_size, _rng(cfg.seed, _PRUNE))

    log: List[dict] = []
    layers_report = []
    units = ordered_units(aug, cfg.order)
    try:
        _prune_units(cfg, aug, units, ctrl, loss_cfg, opt, stream, prune_set, log, layers_report)
    except Exception:
        if cfg.out:
            Path(cfg.out).mkdir(parents=True, exist_ok=True)
            (Path(cfg.out) / "runlog.csv").write_text(RunResult(None, aug, {}, log).runlog_csv())
        raise
    step = sum(l["steps"] for l in layers_report)

    plan = MaskPlan.from_augmented(aug)
    pruned, surgery_report = apply_mask_surgery(aug.network, plan)
    problems = validate(pruned)
    if problems:
        raise RuntimeError(f"surgery produced an invalid network: {problems}")
    if cfg.scratch:
        pruned.weights = init_weights(pruned.spec, int(_rng(cfg.seed, _SCRATCH).integers(2**31)))
    pre_ft = evaluate_error(pruned, data.x, data.y)
    ft_history = _train_epochs(pruned, data, cfg.finetune_epochs, cfg.finetune_lr, cfg.momentum,
                               cfg.batch_size, _rng(cfg.seed, _FINETUNE), decay=True, keep_best=True,
                               what="final fine-tuning")
    pruned.eval()
    final_error = evaluate_error(pruned, data.x, data.y)
    pruned_cost = cost_profile(pruned)
    red = pruned_cost.reduction(base_cost)

    report = {
        "schema": "chansel-report/1",
        "config": cfg.to_dict(),
        "flops_convention": FLOPS_CONVENTION,
        "e_base": e_base,
        "e_base_effective": ctrl.e_base,
        "baseline": {"train_error": e_base, "params": base_cost.total_params,
                     "flops": base_cost.total_flops},
        "pruned": {"train_error": final_error, "pre_finetune_error": pre_ft,
                   "params": pruned_cost.total_params, "flops": pruned_cost.total_flops,
                   "channels": {u: v["kept"] for u, v in surgery_report.units.items()}},
        "reduction": {"params": red["params"], "flops": red["flops"]},
        "layers": layers_report,
        "surgery": surgery_report.to_dict(),
        "finetune": {"errors": ft_history, "start": ft_history[0], "best": min(ft_history)},
        "total_steps": step,
        "warnings": [f"{l['unit']}: restoring budget exhausted" for l in layers_report
                     if l["budget_exhausted"]],
    }
    result = RunResult(pruned, aug, report, log)
    if cfg.out:
        write_run(result, cfg.out)
    return result


def write_run(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "pruned.chsl", result.pruned)
    save_model(out / "augmented.chsl", result.augmented)
    (out / "runlog.csv").write_text(result.runlog_csv())
    (out / "report.json").write_text(result.report_json())
    (out / "summary.csv").write_text(summary_csv([summary_row(result.report)]))


SUMMARY_FIELDS = ("ordering", "c_r", "error", "baseline_error", "params", "flops",
                  "params_reduction", "flops_reduction")


def summary_row(report: dict) -> dict:
    return {"ordering": report["config"]["order"], "c_r": report["config"]["c_r"],
            "error": report["pruned"]["train_error"], "baseline_error": report["e_base"],
            "params": report["pruned"]["params"], "flops": report["pruned"]["flops"],
            "params_reduction": report["reduction"]["params"],
            "flops_reduction": report["reduction"]["flops"]}


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def compare_strategies(cfg: RunConfig, baseline: Optional[Network] = None,
                       data: Optional[Dataset] = None) -> List[dict]:
    """Run every ordering from one shared baseline with identical seeds."""
    data = data if data is not None else load_dataset(cfg.dataset)
    if baseline is None:
        baseline, _ = train_baseline(cfg, data)
    rows = []
    for order in ORDERINGS:
        sub = RunConfig.from_dict({**cfg.to_dict(), "order": order,
                                   "out": str(Path(cfg.out) / order) if cfg.out else None})
        rows.append(summary_row(run_pruning(sub, baseline, data).report))
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "compare.csv").write_text(summary_csv(rows))
    return rows
