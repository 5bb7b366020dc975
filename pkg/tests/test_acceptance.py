"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Lines are collected in ``RESULTS`` and echoed in pytest's terminal summary
(see conftest.py), so they appear in plain ``pytest -v`` output.
"""

import time
from functools import lru_cache

import numpy as np

import test_controller
import test_metrics
import test_pruning
import test_tensor
from chansel.controller import Directive, replay
from chansel.data import load_dataset
from chansel.harness import RunConfig, run_pruning, train_baseline
from chansel.surgery import MaskPlan, validate
from test_surgery import masked_vs_pruned, random_pair

RESULTS = []

# shared toy setup: toy4 on the default blobs data, seed 0
BASE = dict(spec="toy4", dataset="blobs", seed=0, train_epochs=10)
SURGERY_OUTPUTS = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)
    return ok


@lru_cache(maxsize=None)
def baseline():
    cfg = RunConfig(**BASE)
    data = load_dataset(cfg.dataset)
    t = time.perf_counter()
    net, history = train_baseline(cfg, data)
    return net, data, history, time.perf_counter() - t


@lru_cache(maxsize=None)
def toy_run(**overrides):
    net, data, _, _ = baseline()
    t = time.perf_counter()
    res = run_pruning(RunConfig(**{**BASE, **overrides}), net, data)
    SURGERY_OUTPUTS.append(res.pruned)
    return res, time.perf_counter() - t


def _run(fn, *args):
    try:
        fn(*args)
        return None
    except AssertionError as exc:
        return f"{fn.__name__}{args}: {exc}"


def test_criterion_1_gradients():
    t = time.perf_counter()
    failures, count = [], 0
    ops = [test_tensor.test_grad_add_mul_scale_sum, test_tensor.test_grad_relu, test_tensor.test_grad_conv2d,
           test_tensor.test_grad_channel_scale, test_tensor.test_grad_maxpool,
           test_tensor.test_grad_avgpool_dense, test_tensor.test_grad_cross_entropy,
           test_pruning.test_penalty_gradient_matches_fd, test_pruning.test_full_objective_gradient_matches_fd]
    for seed in range(20):
        for fn in ops:
            failures.append(_run(fn, seed))
        failures += [_run(test_tensor.test_grad_batchnorm, seed, mode) for mode in (True, False)]
        count += len(ops) + 2
    failures = [f for f in failures if f]
    elapsed = time.perf_counter() - t
    ok = not failures and elapsed < 60
    report(1, ok, f"{count} instances over 10 op families, {len(failures)} above 1e-4, {elapsed:.1f}s")
    assert ok, failures[:3]


def test_criterion_2_surgery_equivalence():
    t = time.perf_counter()
    worst, residual = 0.0, 0
    for seed in range(60):
        _, aug, rng = random_pair(seed)
        residual += bool(aug.network.spec.groups())
        ref, got, pruned, _ = masked_vs_pruned(aug, rng)
        worst = max(worst, float(np.max(np.abs(ref - got))))
        SURGERY_OUTPUTS.append(pruned)
    elapsed = time.perf_counter() - t
    ok = worst < 1e-5 and residual > 0 and elapsed < 120
    report(2, ok, f"60 pairs ({residual} residual), max |diff| {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_controller_replay():
    failures = [_run(fn) for fn in (test_controller.test_boundaries_are_strict,
                                     test_controller.test_worked_example_thresholds,
                                     test_controller.test_pruning_budget_forces_restoring_and_restoring_budget_ends_layer,
                                     test_controller.test_natural_completion_does_not_raise_flags,
                                     test_controller.test_begin_layer_resets_sign_and_carries_ema)]
    # hand-computed: flip on the first step, done once E_ema drops below 0.25; then a trace that never transitions
    P, R, D = Directive.CONTINUE_PRUNING, Directive.CONTINUE_RESTORING, Directive.LAYER_DONE
    ctrl = replay([1.0, 0.0, 0.5, 0.0], e_base=0.125, alpha=0.5, c_p=4.0, c_r=2.0)
    trace = [(r.e_ema, r.directive, r.lambda1 < 0) for r in ctrl.trace]
    if trace != [(0.5625, R, True), (0.28125, R, True), (0.390625, R, True), (0.1953125, D, True)]:
        failures.append(f"hand trace mismatch: {trace}")
    ctrl = replay([0.5, 0.5, 0.25, 0.0], e_base=0.125, alpha=0.5, c_p=4.0, c_r=2.0)
    trace = [(r.e_ema, r.directive) for r in ctrl.trace]
    if trace != [(0.3125, P), (0.40625, P), (0.328125, P), (0.1640625, P)]:
        failures.append(f"hand trace mismatch: {trace}")
    failures = [f for f in failures if f]
    ok = not failures
    report(3, ok, f"7 scripted traces incl. E_ema == c_p*E_base and == c_r*E_base; {len(failures)} mismatches")
    assert ok, failures


def _p_stats(res):
    layers = list(res.augmented.layers.values())
    p = np.concatenate([l.P.data for l in layers])
    mid = float(np.mean((p > 0.25) & (p < 0.75)))
    flips = {tau: int(sum(((l.P.data > tau) != (l.P.data > 0.5)).sum() for l in layers)) for tau in (0.45, 0.55)}
    return mid, flips


def test_criterion_4_bipolar_effect():
    with_bp, t1 = toy_run(lambda2=0.002)
    without, t2 = toy_run(lambda2=0.0)
    mid_bp, flips = _p_stats(with_bp)
    mid_plain, _ = _p_stats(without)
    elapsed = baseline()[3] + t1 + t2
    ok = mid_bp < mid_plain and max(flips.values()) <= 1 and elapsed < 300
    report(4, ok, f"mid-fraction {mid_bp:.3f} vs {mid_plain:.3f} without the bipolar term; "
                  f"channels changed at tau 0.45/0.55: {flips[0.45]}/{flips[0.55]}; {elapsed:.0f}s")
    assert ok


def test_criterion_5_end_to_end():
    net, data, history, t0 = baseline()
    first, t1 = toy_run(lambda2=0.002)
    net2, data2, _, _ = baseline()
    t = time.perf_counter()
    repeat = run_pruning(RunConfig(**BASE, lambda2=0.002), net2, data2)
    t2 = time.perf_counter() - t
    rep = first.report
    limit = rep["config"]["c_r"] * rep["e_base_effective"]
    elapsed = t0 + t1 + t2
    identical = repeat.report_json() == first.report_json() and repeat.runlog_csv() == first.runlog_csv()
    ok = (history[-1] <= 0.05 and rep["reduction"]["params"] >= 0.20
          and rep["pruned"]["train_error"] <= limit and identical and elapsed < 600)
    report(5, ok, f"baseline error {history[-1]:.4f}, params -{rep['reduction']['params']:.1%}, "
                  f"FLOPs -{rep['reduction']['flops']:.1%}, final error {rep['pruned']['train_error']:.4f} "
                  f"<= {limit:.4f}, repeat identical={identical}, {elapsed:.0f}s")
    assert ok


def test_criterion_6_monotone_c_r():
    loose, _ = toy_run(lambda2=0.002)
    tight, _ = toy_run(lambda2=0.002, c_r=1.2)
    kept = {c: sum(l["kept"] for l in r.report["layers"]) for c, r in ((2.0, loose), (1.2, tight))}
    pruned = {c: sum(l["channels"] for l in loose.report["layers"]) - k for c, k in kept.items()}
    ok = pruned[1.2] <= pruned[2.0]
    report(6, ok, f"channels pruned: {pruned[1.2]} at c_r=1.2, {pruned[2.0]} at c_r=2.0")
    assert ok


def test_criterion_7_cost_accounting():
    failures = [_run(test_metrics.test_counters_match_brute_force, seed) for seed in range(10)]
    failures += [_run(fn) for fn in (test_metrics.test_halving_a_producer_is_exact,
                                     test_metrics.test_param_examples, test_metrics.test_flops_example,
                                     test_metrics.test_reductions_two_ways_and_identity_plan)]
    failures = [f for f in failures if f]
    ok = not failures
    report(7, ok, f"10 random architectures vs brute force, halving example exact; {len(failures)} mismatches")
    assert ok, failures


ADVERSARIAL = [dict(c_p=1e6, c_r=5e5, lambda1=0.5),   # never restores until the budget runs out
               dict(c_p=1.0001, c_r=1.0, lambda1=0.5),  # restores at the slightest degradation
               dict(c_p=50.0, c_r=1.0, lambda1=-0.5)]   # sign-inverted sparsity


def test_criterion_8_residual_invariants():
    problems = []
    net, data, _, _ = baseline()
    small = dict(train_epochs=5, inter_epochs=1, finetune_epochs=2, max_pruning_steps=150,
                 max_restoring_steps=150)
    res_cfg = RunConfig(**{**BASE, **small, "spec": "toy_resnet", "residual_mode": "between"})
    res_net, _ = train_baseline(res_cfg, data)
    res_run = run_pruning(res_cfg, res_net, data)
    SURGERY_OUTPUTS.append(res_run.pruned)
    masks = res_run.augmented.scales("binary")
    groups = [l for l in res_run.augmented.layers.values() if l.shared]
    for g in groups:
        ref = masks[g.sites[0]].data
        if not all(np.array_equal(masks[s].data, ref) for s in g.sites):
            problems.append(f"group {g.name} has differing block masks")
        plan = MaskPlan.from_site_masks(res_run.augmented.network, {s: masks[s].data for s in g.sites})
        if not np.array_equal(plan.keep[g.name], g.effective_mask() > 0):
            problems.append(f"group {g.name}: site masks disagree with the group mask")
    for g in res_run.pruned.spec.groups():
        if len({b.out_channels for b in g.blocks} | {g.out_channels}) != 1:
            problems.append(f"pruned group {g.name} has inconsistent block widths")

    floor_runs = 0
    for spec in ("toy4", "toy_resnet"):
        for adv in ADVERSARIAL:
            cfg = RunConfig(**{**BASE, **small, "spec": spec, "p_lr": 100.0, "max_pruning_steps": 60,
                               "max_restoring_steps": 60, "finetune_epochs": 1, **adv})
            run = run_pruning(cfg, net if spec == "toy4" else res_net, data)
            floor_runs += 1
            SURGERY_OUTPUTS.append(run.pruned)
            for name, layer in run.augmented.layers.items():
                if layer.effective_mask().sum() < 1:
                    problems.append(f"{spec} {adv}: {name} lost every channel")
            for u in run.pruned.units():
                if u.channels < 1:
                    problems.append(f"{spec} {adv}: pruned unit {u.name} is empty")

    checked = 0
    for pruned in SURGERY_OUTPUTS:
        issues = validate(pruned)
        checked += 1
        if issues:
            problems.append(f"validate: {issues}")
    ok = not problems and bool(groups)
    report(8, ok, f"{len(groups)} shared groups consistent, validate clean on {checked} surgery outputs, "
                  f"floor held in {floor_runs} adversarial runs; {len(problems)} problems")
    assert ok, problems[:5]
