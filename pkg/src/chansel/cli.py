"""Command line entry point (``chansel`` or ``python -m chansel``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .data import load_dataset
from .harness import (ORDERINGS, ConfigError, RunConfig, TrainingDiverged, compare_strategies,
                      run_pruning, summary_csv, train_baseline)
from .metrics import FLOPS_CONVENTION, cost_profile, evaluate_error
from .network import RESIDUAL_MODES, AugmentedNetwork, SpecError
from .serialize import ModelFileError, load_model, save_model
from .surgery import MaskPlan, SurgeryError, apply_mask_surgery, validate

log = logging.getLogger("chansel")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", default="toy4", help="built-in architecture or JSON spec file")
    p.add_argument("--dataset", default="blobs", help="blobs[:k=v,...] or raw:path=FILE[+FILE]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30, help="baseline training epochs")
    p.add_argument("--lr", type=float, default=0.05, help="baseline learning rate")
    p.add_argument("--batch-size", type=int, default=32)


def _pruning(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    p.add_argument("--model", help="trained baseline model file (trained from scratch if omitted)")
    p.add_argument("--order", choices=ORDERINGS, default=d.order)
    p.add_argument("--residual-mode", choices=RESIDUAL_MODES, default=d.residual_mode)
    p.add_argument("--lambda1", type=float, default=d.lambda1)
    p.add_argument("--lambda2", type=float, default=d.lambda2)
    p.add_argument("--cp", type=float, default=d.c_p)
    p.add_argument("--cr", type=float, default=d.c_r)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--update-freq", type=int, default=d.update_frequency)
    p.add_argument("--sample-ratio", type=float, default=d.sample_ratio)
    p.add_argument("--p-lr", type=float, default=d.p_lr, help="learning rate of pruning weights")
    p.add_argument("--prune-lr", type=float, default=d.prune_lr, help="weight learning rate while pruning")
    p.add_argument("--inter-epochs", type=int, default=d.inter_epochs)
    p.add_argument("--finetune-epochs", type=int, default=d.finetune_epochs)
    p.add_argument("--finetune-lr", type=float, default=d.finetune_lr)
    p.add_argument("--max-steps", type=int, default=d.max_pruning_steps,
                   help="per-layer step budget for each of pruning and restoring")
    p.add_argument("--scratch", action="store_true", help="re-initialize the pruned net before fine-tuning")
    p.add_argument("--out", default="run", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chansel", description="Cost-aware progressive channel pruning.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a baseline model from scratch")
    _common(p)
    p.add_argument("--out", default="baseline.chsl", help="model file to write")

    p = sub.add_parser("prune", help="prune a baseline, then fine-tune")
    _common(p)
    _pruning(p)

    p = sub.add_parser("compare-orders", help="prune with every layer ordering from one baseline")
    _common(p)
    _pruning(p)

    p = sub.add_parser("surgery", help="remove masked channels from an augmented model file")
    p.add_argument("--model", required=True, help="augmented model file")
    p.add_argument("--out", required=True, help="pruned model file to write")

    p = sub.add_parser("report", help="params/FLOPs (and error) of a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", help="model file to compute reductions against")
    p.add_argument("--dataset", help="dataset to measure training error on")
    return ap


def _config(args) -> RunConfig:
    cfg = RunConfig(spec=args.spec, dataset=args.dataset, order=args.order,
                    residual_mode=args.residual_mode, lambda1=args.lambda1, lambda2=args.lambda2,
                    c_p=args.cp, c_r=args.cr, alpha=args.alpha, update_frequency=args.update_freq,
                    sample_ratio=args.sample_ratio, seed=args.seed, batch_size=args.batch_size,
                    train_epochs=args.epochs, train_lr=args.lr, prune_lr=args.prune_lr,
                    p_lr=args.p_lr, inter_epochs=args.inter_epochs,
                    finetune_epochs=args.finetune_epochs, finetune_lr=args.finetune_lr,
                    max_pruning_steps=args.max_steps, max_restoring_steps=args.max_steps,
                    scratch=args.scratch, out=args.out)
    cfg.validate()
    return cfg


def _baseline(args, cfg, data):
    if not args.model:
        net, _ = train_baseline(cfg, data)
        return net
    net = load_model(args.model)
    if isinstance(net, AugmentedNetwork):
        raise ConfigError(f"{args.model} is an augmented model; pass a plain baseline")
    return net


def cmd_train(args) -> int:
    cfg = RunConfig(spec=args.spec, dataset=args.dataset, seed=args.seed, train_epochs=args.epochs,
                    train_lr=args.lr, batch_size=args.batch_size)
    data = load_dataset(cfg.dataset)
    net, history = train_baseline(cfg, data)
    save_model(args.out, net)
    print(json.dumps({"model": args.out, "train_error": history[-1], "errors": history}))
    return 0


def cmd_prune(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg.dataset)
    result = run_pruning(cfg, _baseline(args, cfg, data), data)
    print(result.report_json())
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg.dataset)
    rows = compare_strategies(cfg, _baseline(args, cfg, data), data)
    sys.stdout.write(summary_csv(rows))
    return 0


def cmd_surgery(args) -> int:
    model = load_model(args.model)
    if not isinstance(model, AugmentedNetwork):
        raise ConfigError(f"{args.model} holds no pruning layers")
    pruned, report = apply_mask_surgery(model.network, MaskPlan.from_augmented(model))
    problems = validate(pruned)
    if problems:
        raise SurgeryError("; ".join(problems))
    save_model(args.out, pruned)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    model = load_model(args.model)
    net = model.network if isinstance(model, AugmentedNetwork) else model
    prof = cost_profile(net)
    out = {"model": args.model, "spec": net.spec.name, "flops_convention": FLOPS_CONVENTION,
           "params": prof.total_params, "flops": prof.total_flops, "per_layer": prof.to_dict(),
           "violations": validate(model)}
    if isinstance(model, AugmentedNetwork):
        out["kept"] = {n: int(l.effective_mask().sum()) for n, l in model.layers.items()}
    if args.baseline:
        base = load_model(args.baseline)
        base = base.network if isinstance(base, AugmentedNetwork) else base
        out["reduction"] = prof.reduction(cost_profile(base))
    if args.dataset:
        data = load_dataset(args.dataset)
        out["train_error"] = evaluate_error(model, data.x, data.y)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "compare-orders": cmd_compare,
            "surgery": cmd_surgery, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SpecError, ModelFileError, SurgeryError, TrainingDiverged,
            ValueError, FileNotFoundError) as exc:
        print(f"chansel {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
