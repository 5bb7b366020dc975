import numpy as np
import pytest

import chansel.tensor as T
from chansel.architectures import toy4, toy_resnet
from chansel.network import augment, build
from chansel.optim import SGD
from chansel.pruning import (LossConfig, PruningLayer, batch_error, binarize, bipolar_penalty,
                             init_pruning_weights, phase1_step, phase2_step, pruning_penalty,
                             schedule, sparsity_penalty, total_loss)
from chansel.tensor import NonFiniteError, Tensor

from oracles import (kink_aware_numeric_grad, numeric_grad, random_plain_spec, random_resnet_spec,
                     rel_error)


def _batch(net, rng, n=6):
    x = rng.normal(size=(n,) + tuple(net.spec.input_shape))
    return x, rng.integers(0, net.spec.num_classes, size=n)


def test_init_statistics():
    p = init_pruning_weights(10000, np.random.default_rng(0))
    assert abs(p.mean() - 1.0) < 0.01
    assert abs(p.std() - 0.1) < 0.01
    fresh = init_pruning_weights(64, np.random.default_rng(1))
    assert binarize(fresh).all()
    assert PruningLayer("l", fresh).B.tolist() == [1.0] * 64
    with pytest.raises(ValueError):
        init_pruning_weights(0, np.random.default_rng(0))


def test_binarize_is_strict_and_idempotent():
    assert binarize([0.9, 0.3, 0.5]).tolist() == [1, 0, 0]
    assert binarize(np.ones(4)).tolist() == [1, 1, 1, 1]
    p = np.random.default_rng(0).normal(0.5, 0.5, 50)
    np.testing.assert_array_equal(binarize(binarize(p)), binarize(p))


def test_penalty_values():
    assert sparsity_penalty([0.9, 0.3]) == pytest.approx(1.2)
    assert sparsity_penalty(np.zeros(3)) == 0.0
    assert sparsity_penalty([-0.2, 0.2]) == pytest.approx(0.4)
    assert bipolar_penalty([0, 1, 1, 0]) == 0.0
    assert bipolar_penalty([0.5]) == pytest.approx(0.25)
    assert bipolar_penalty([0.9, 0.3]) == pytest.approx(0.30)
    # out-of-range values are penalized, not rejected
    assert bipolar_penalty([1.5, -0.5]) == pytest.approx(0.75 + 0.75)


def test_total_loss_values():
    cfg = LossConfig(0.002, 0.002)
    assert total_loss(0.5, Tensor([0.9, 0.3]), cfg).item() == pytest.approx(0.503)
    assert total_loss(0.5, Tensor([0.9, 0.3]), LossConfig(0.0, 0.0)).item() == 0.5
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        pruning_penalty(Tensor(np.array([1e200, 1e200])), cfg)


@pytest.mark.parametrize("seed", range(20))
def test_penalty_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size=8)
    p[:2] = rng.uniform(-0.5, -0.05, 2)
    p[2:4] = rng.uniform(1.05, 1.5, 2)
    cfg = LossConfig(float(rng.uniform(-0.01, 0.01)), float(rng.uniform(0, 0.01)))
    t = Tensor(p, requires_grad=True)
    pruning_penalty(t, cfg).backward()
    num = numeric_grad(lambda: pruning_penalty(Tensor(p), cfg).item(), p)
    assert rel_error(t.grad, num) < 1e-4


def test_penalty_subgradient_is_zero_at_bipolar_targets():
    t = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    pruning_penalty(t, LossConfig(0.0, 0.002)).backward()
    np.testing.assert_array_equal(t.grad, [0.0, 0.0])


@pytest.mark.parametrize("seed", range(20))
def test_full_objective_gradient_matches_fd(seed):
    """Task loss through real P at every site plus both penalties, w.r.t. P and conv weights."""
    rng = np.random.default_rng(seed)
    spec = random_resnet_spec(rng, size=4) if seed % 2 else random_plain_spec(rng, sizes=(4,))
    net = build(spec, seed)
    for _lname, key, t in net.weights.entries():
        # keep w^2 * var far above the BN epsilon, where the loss is badly conditioned in w
        if key == "weight" and t.ndim == 4:
            t.data = np.sign(t.data) * np.maximum(np.abs(t.data), 0.1)
    aug = augment(net, "within+between", seed=seed)
    for layer in aug.layers.values():
        layer.P.data = rng.uniform(0.05, 0.95, layer.channels)
    x, y = _batch(net, rng, 4)
    cfg = LossConfig(0.002, 0.002)
    ps = [l.P for l in aug.layers.values()]
    first_conv = next(k for k in net.weights.layers if "conv" in k)
    w = net.weights[first_conv]["weight"]

    def objective():
        logits = aug.forward(x, "real", update_stats=False)
        return total_loss(T.softmax_cross_entropy(logits, y), ps, cfg)

    net.train()
    for p in ps:
        p.requires_grad = True
    objective().backward()
    checked = 0
    for t in ps + [w]:
        num, ok = kink_aware_numeric_grad(lambda: objective().item(), t.data)
        assert rel_error(t.grad[ok], num[ok]) < 1e-4
        checked += ok.sum()
    assert checked >= 0.75 * (sum(p.size for p in ps) + w.size)


def _zero_head(net):
    net.weights["fc"]["weight"].data[:] = 0.0


def test_phase1_updates_only_active_p_and_freezes_weights():
    rng = np.random.default_rng(0)
    net = build(toy4(), 0)
    aug = augment(net, seed=1)
    before_w = net.weights.copy()
    others = {n: l.P.data.copy() for n, l in aug.layers.items() if n != "conv2"}
    p_before = aug.layers["conv2"].P.data.copy()
    x, y = _batch(net, rng, 8)
    phase1_step(aug, x, y, "conv2", LossConfig(), learning_rate=0.5)
    assert net.weights.equal(before_w)  # includes BN running statistics
    for n, p in others.items():
        np.testing.assert_array_equal(aug.layers[n].P.data, p)
    assert not np.array_equal(aug.layers["conv2"].P.data, p_before)
    np.testing.assert_array_equal(aug.layers["conv2"].B, binarize(aug.layers["conv2"].P))


def test_phase1_sign_behaviour_with_zero_task_gradient():
    rng = np.random.default_rng(0)
    net = build(toy4(), 0)
    _zero_head(net)
    aug = augment(net, seed=1)
    layer = aug.layers["conv1"]
    layer.P.data = np.linspace(0.55, 0.95, layer.channels)
    x, y = _batch(net, rng, 8)
    start = layer.P.data.copy()
    phase1_step(aug, x, y, "conv1", LossConfig(0.002, 0.002), learning_rate=1.0)
    assert (layer.P.data < start).all()

    layer.P.data = np.full(layer.channels, 0.6)
    phase1_step(aug, x, y, "conv1", LossConfig(-0.002, 0.002), learning_rate=1.0)
    # gradient -0.002 + 0.002*(1 - 1.2) = -0.0024
    np.testing.assert_allclose(layer.P.data, 0.6 + 0.0024)


def test_phase1_uses_real_p_everywhere():
    rng = np.random.default_rng(0)
    net = build(toy4(), 0)
    aug = augment(net, seed=1)
    aug.layers["conv3"].P.data[:] = 0.0  # B stays all ones until conv3 is refreshed
    x, y = _batch(net, rng, 8)
    net.train()
    with net.frozen():
        expected = T.softmax_cross_entropy(aug.forward(x, "real", update_stats=False), y).item()
    cfg = LossConfig(0.0, 0.0)
    got = phase1_step(aug, x, y, "conv1", cfg, learning_rate=1e-9)
    assert got == pytest.approx(expected, rel=1e-9)


def test_shared_group_accumulates_all_sites():
    rng = np.random.default_rng(0)
    net = build(toy_resnet(), 0)
    aug = augment(net, "within+between", seed=2)
    layer = aug.layers["group1"]
    assert layer.shared and len(layer.sites) == 2
    x, y = _batch(net, rng, 4)
    net.train()
    layer.P.requires_grad = True
    T.softmax_cross_entropy(aug.forward(x, "real", update_stats=False), y).backward()
    shared_grad = layer.P.grad.copy()
    layer.P.requires_grad = False
    layer.P.grad = None
    # same loss with the two sites fed from independent copies of P
    site_ps = {s: Tensor(layer.P.data.copy(), requires_grad=True) for s in layer.sites}
    scales = aug.scales("real")
    scales.update(site_ps)
    T.softmax_cross_entropy(net.forward(x, scales, update_stats=False), y).backward()
    np.testing.assert_allclose(shared_grad, sum(p.grad for p in site_ps.values()), rtol=1e-10)
    phase1_step(aug, x, y, "group1", LossConfig(), learning_rate=5.0)
    masks = aug.scales("binary")
    np.testing.assert_array_equal(masks[layer.sites[0]].data, masks[layer.sites[1]].data)


def test_phase2_freezes_p_and_matches_plain_step():
    rng = np.random.default_rng(0)
    x, y = _batch(build(toy4(), 0), rng, 8)
    plain = build(toy4(), 0)
    aug = augment(build(toy4(), 0), seed=1)
    p_before = {n: l.P.data.copy() for n, l in aug.layers.items()}
    res = phase2_step(aug, x, y, SGD(aug.network.parameters(), 0.1, 0.9))
    opt = SGD(plain.parameters(), 0.1, 0.9)
    plain.train()
    loss = T.softmax_cross_entropy(plain.forward(x), y)
    opt.zero_grad()
    loss.backward()
    opt.step()
    assert res.loss == loss.item()
    assert aug.network.weights.equal(plain.weights)
    for n, l in aug.layers.items():
        np.testing.assert_array_equal(l.P.data, p_before[n])


def test_batch_error_rate():
    logits = np.eye(10)
    labels = np.arange(10)
    labels[[1, 4, 7]] = 0
    assert batch_error(logits, labels) == pytest.approx(0.3)


def test_schedule():
    assert [s for s in range(21) if schedule(s, 10)] == [0, 10, 20]
    assert all(schedule(s, 1) for s in range(5))
    assert not schedule(7, 10)
    with pytest.raises(ValueError):
        schedule(-1)


def test_last_channel_floor():
    layer = PruningLayer("l", np.array([0.1, 0.4, 0.2]))
    layer.refresh()
    assert not layer.B.any()
    assert layer.effective_mask().tolist() == [0.0, 1.0, 0.0]
