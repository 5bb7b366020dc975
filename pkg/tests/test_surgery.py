import numpy as np
import pytest

from chansel.architectures import toy4, toy_resnet
from chansel.metrics import cost_profile
from chansel.network import LayerSpec, augment, build
from chansel.surgery import MaskPlan, SurgeryError, apply_mask_surgery, residual_group_surgery, validate

from oracles import random_plain_spec, random_resnet_spec, randomize_state

MODES = ("within", "between", "within+between")


def random_pair(seed):
    """A random network (plain or residual) with random binary masks on every pruning layer."""
    rng = np.random.default_rng(seed)
    spec = random_resnet_spec(rng) if seed % 3 else random_plain_spec(rng)
    net = build(spec, seed)
    randomize_state(net, rng)
    aug = augment(net, MODES[seed % 3], seed=seed)
    for layer in aug.layers.values():
        layer.P.data = rng.uniform(0, 1, layer.channels)
        if rng.random() < 0.1:
            layer.P.data[:] = rng.uniform(0, 0.5, layer.channels)  # empty mask, floor kicks in
        layer.refresh()
    return net, aug, rng


def masked_vs_pruned(aug, rng, n=5):
    x = rng.normal(size=(n,) + tuple(aug.network.spec.input_shape))
    aug.network.eval()
    pruned, report = apply_mask_surgery(aug.network, MaskPlan.from_augmented(aug))
    pruned.eval()
    return aug.forward(x, "binary").data, pruned.forward(x).data, pruned, report


@pytest.mark.parametrize("seed", range(60))
def test_masked_forward_equals_pruned_forward(seed):
    net, aug, rng = random_pair(seed)
    ref, got, pruned, _ = masked_vs_pruned(aug, rng)
    assert np.max(np.abs(ref - got)) < 1e-5
    assert validate(pruned) == []
    before, after = cost_profile(net), cost_profile(pruned)
    assert after.total_params <= before.total_params
    assert after.total_flops <= before.total_flops
    if MaskPlan.from_augmented(aug).is_identity():
        assert after.total_params == before.total_params
    else:
        assert after.total_params < before.total_params


def test_worked_example_keep_one_of_four():
    net = build(toy4(channels=(4, 5, 6, 7)), 0)
    plan = MaskPlan({"conv1": np.array([1, 0, 1, 1])})
    pruned, report = apply_mask_surgery(net, plan)
    assert pruned.weights["conv1"]["weight"].shape == (3, 3, 3, 3)
    assert pruned.weights["conv2"]["weight"].shape == (5, 3, 3, 3)
    assert pruned.weights["bn1"]["running_mean"].shape == (3,)
    assert report.units["conv1"] == {"kept": 3, "removed": 1}
    assert "conv2" in report.consumers["conv1"]
    np.testing.assert_array_equal(pruned.weights["conv2"]["weight"].data,
                                  net.weights["conv2"]["weight"].data[:, [0, 2, 3]])


def test_last_conv_slims_classifier():
    net = build(toy4(), 0)
    keep = np.zeros(32, bool)
    keep[[3, 9]] = True
    pruned, report = apply_mask_surgery(net, MaskPlan({"conv4": keep}))
    assert pruned.weights["fc"]["weight"].shape == (4, 2)
    assert "fc" in report.consumers["conv4"]


def test_identity_plan_is_bit_identical_and_idempotent():
    net = build(toy_resnet(), 3)
    randomize_state(net, np.random.default_rng(0))
    plan = MaskPlan({u.name: np.ones(u.channels, bool) for u in net.units()})
    pruned, _ = apply_mask_surgery(net, plan)
    assert pruned.spec.to_dict() == net.spec.to_dict()
    assert pruned.weights.equal(net.weights)
    x = np.random.default_rng(1).normal(size=(3, 3, 16, 16))
    net.eval(), pruned.eval()
    np.testing.assert_array_equal(net.forward(x).data, pruned.forward(x).data)
    again, _ = apply_mask_surgery(pruned, MaskPlan({}))
    assert again.weights.equal(pruned.weights)


def test_residual_group_surgery_keeps_blocks_consistent():
    net = build(toy_resnet(), 0)
    randomize_state(net, np.random.default_rng(0))
    keep = np.array([1, 1, 0, 1, 1, 1, 0, 1], bool)  # group1 has 8 channels
    pruned, report = residual_group_surgery(net, "group1", keep)
    g1 = next(it for it in pruned.spec.layers if getattr(it, "name", "") == "group1")
    assert g1.out_channels == 6 and all(b.out_channels == 6 for b in g1.blocks)
    assert pruned.weights["g1b1.proj"]["weight"].shape[0] == 6
    assert pruned.weights["g1b2.conv1"]["weight"].shape[1] == 6
    assert pruned.weights["g2b1.conv1"]["weight"].shape[1] == 6
    assert pruned.weights["g2b1.proj"]["weight"].shape[1] == 6
    # preceding group untouched: chain effect stays inside
    assert pruned.weights["conv1"]["weight"].shape == net.weights["conv1"]["weight"].shape
    assert validate(pruned) == []
    same, _ = residual_group_surgery(net, "group1", np.ones(8, bool))
    assert same.weights.equal(net.weights)
    with pytest.raises(SurgeryError):
        residual_group_surgery(net, "nope", keep)


def test_site_masks_must_agree_within_group():
    net = build(toy_resnet(), 0)
    a = np.ones(8)
    b = a.copy()
    b[0] = 0
    with pytest.raises(SurgeryError, match="inconsistent"):
        MaskPlan.from_site_masks(net, {"g1b1.out": a, "g1b2.out": b})
    plan = MaskPlan.from_site_masks(net, {"g1b1.out": b, "g1b2.out": b})
    assert plan.keep["group1"].sum() == 7


def test_plan_errors():
    net = build(toy4(), 0)
    with pytest.raises(SurgeryError, match="every channel"):
        apply_mask_surgery(net, MaskPlan({"conv1": np.zeros(16)}))
    with pytest.raises(SurgeryError, match="length"):
        apply_mask_surgery(net, MaskPlan({"conv1": np.ones(15)}))
    with pytest.raises(SurgeryError, match="not a prunable unit"):
        apply_mask_surgery(net, MaskPlan({"fc": np.ones(4)}))


def test_validate_reports_stale_consumer():
    net = build(toy4(), 0)
    assert validate(net) == []
    conv2 = next(l for l in net.spec.layers if isinstance(l, LayerSpec) and l.name == "conv2")
    conv2.in_channels = 12
    problems = validate(net)
    assert problems and any("conv2" in p and ("conv1" in p or "relu1" in p or "pool1" in p)
                            for p in problems)


def test_validate_flags_orphan_pruning_layer():
    net = build(toy4(), 0)
    aug = augment(net, seed=0)
    aug.layers["conv1"].sites = ("ghost",)
    assert any("orphan" in p for p in validate(aug))
