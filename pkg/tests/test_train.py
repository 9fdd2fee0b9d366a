import math

import numpy as np
import pytest

from depthsep.arch import parse_arch
from depthsep.ops import softmax
from depthsep.runtime import init_weights
from depthsep.tensor import ShapeError
from depthsep.train import (
    GRADCHECK_BN_EPS,
    MICRO_ARCH_TEXT,
    TOY_ARCH_TEXT,
    OptimState,
    RegPolicy,
    ToyConfig,
    backward_train,
    depthwise_kernel_names,
    forward_train,
    grad_check,
    make_toy_batch,
    rmsprop_step,
    train_toy,
    trainable_names,
    xent_loss,
)

# --- rmsprop ------------------------------------------------------------------


def test_rmsprop_hand_case():
    p = {"w": np.array([1.0])}
    g = {"w": np.array([1.0])}
    state = OptimState(lr=0.1)
    rmsprop_step(p, g, state)
    # acc = 0.1 * 1, step = 0.1 / sqrt(0.1 + 1e-8)
    want = 1.0 - 0.1 / math.sqrt(0.1 + 1e-8)
    np.testing.assert_allclose(p["w"], want, rtol=1e-12)
    np.testing.assert_allclose(state.acc["w"], 0.1, rtol=1e-12)


def test_rmsprop_zero_gradient_leaves_param():
    p = {"w": np.array([2.5])}
    state = OptimState(lr=0.1)
    state.acc["w"] = np.array([0.4])
    rmsprop_step(p, {"w": np.array([0.0])}, state)
    np.testing.assert_array_equal(p["w"], [2.5])
    np.testing.assert_allclose(state.acc["w"], 0.36, rtol=1e-12)  # decays by 0.9


def test_rmsprop_shape_mismatch():
    with pytest.raises(ShapeError):
        rmsprop_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimState())


def test_depthwise_decay_policy_exact_equality():
    reg = RegPolicy(l2=0.01, l2_depthwise=0.0)
    grads = {"dw1/kernel": np.full(4, 0.5), "pw2/kernel": np.full(4, 0.5)}

    plain = {k: np.ones(4) for k in grads}
    rmsprop_step(plain, {k: g.copy() for k, g in grads.items()}, OptimState(lr=0.1))

    reged = {k: np.ones(4) for k in grads}
    rmsprop_step(
        reged,
        {k: g.copy() for k, g in grads.items()},
        OptimState(lr=0.1),
        reg=reg,
        depthwise_names=frozenset(["dw1/kernel"]),
    )
    np.testing.assert_array_equal(reged["dw1/kernel"], plain["dw1/kernel"])
    assert not np.array_equal(reged["pw2/kernel"], plain["pw2/kernel"])


def test_reg_policy_validation():
    with pytest.raises(ValueError):
        RegPolicy(l2=-1.0)


# --- cross entropy --------------------------------------------------------------


def test_xent_uniform_is_log_k():
    probs = np.full((3, 10), 0.1)
    loss, _ = xent_loss(probs, np.array([0, 5, 9]))
    np.testing.assert_allclose(loss, 2.302585, rtol=1e-6)


def test_xent_perfect_prediction_is_zero():
    probs = np.zeros((2, 4))
    probs[0, 1] = 1.0
    probs[1, 3] = 1.0
    loss, _ = xent_loss(probs, np.array([1, 3]))
    assert loss == 0.0


def test_xent_label_out_of_range():
    with pytest.raises(ShapeError):
        xent_loss(np.full((1, 4), 0.25), np.array([4]))


def test_xent_gradient_matches_fd_on_four_logits():
    logits = np.array([[0.3, -1.2, 0.7, 0.1]], dtype=np.float64)
    labels = np.array([2])

    def loss_of(z):
        loss, _ = xent_loss(softmax(z), labels)
        return loss

    _, grad = xent_loss(softmax(logits), labels)
    h = 1e-6
    for j in range(4):
        zp, zm = logits.copy(), logits.copy()
        zp[0, j] += h
        zm[0, j] -= h
        fd = (loss_of(zp) - loss_of(zm)) / (2 * h)
        assert abs(grad[0, j] - fd) < 1e-6


# --- gradient checking ------------------------------------------------------------


def test_grad_check_default_micro_net_passes():
    report = grad_check()
    assert report.param_count < 2000
    assert report.max_rel_err < 1e-6
    assert set(report.per_tensor) == set(trainable_names(parse_arch(MICRO_ARCH_TEXT)))


def test_fd_estimate_converges_quadratically():
    # doubling h should quadruple the fd-vs-analytic gap on a smooth coordinate
    arch = parse_arch(MICRO_ARCH_TEXT)
    store = {n: t.astype(np.float64) for n, t in init_weights(arch, seed=40).items()}
    for n in list(store):
        if n.endswith("/eps"):
            store[n] = np.full(1, GRADCHECK_BN_EPS)
    rng = np.random.Generator(np.random.PCG64(41))
    x = rng.normal(size=(2, 8, 8, 3))
    labels = rng.integers(0, 3, size=2)

    def loss_at():
        probs, _ = forward_train(arch, store, x)
        return xent_loss(probs, labels)[0]

    def fd(h):
        orig = store["fc/bias"][0]
        store["fc/bias"][0] = orig + h
        plus = loss_at()
        store["fc/bias"][0] = orig - h
        minus = loss_at()
        store["fc/bias"][0] = orig
        return (plus - minus) / (2 * h)

    probs, caches = forward_train(arch, store, x)
    _, dlogits = xent_loss(probs, labels)
    analytic = backward_train(arch, store, caches, dlogits)["fc/bias"][0]
    err1 = abs(fd(1e-2) - analytic)
    err2 = abs(fd(2e-2) - analytic)
    assert 2.0 < err2 / err1 < 8.0


def test_zero_input_gives_zero_conv_weight_grads():
    arch = parse_arch(MICRO_ARCH_TEXT)
    store = {n: t.astype(np.float64) for n, t in init_weights(arch, seed=0).items()}
    x = np.zeros((2, 8, 8, 3))
    probs, caches = forward_train(arch, store, x)
    _, dlogits = xent_loss(probs, np.array([0, 1]))
    grads = backward_train(arch, store, caches, dlogits)
    for name in ("conv0/kernel", "dw1/kernel", "pw2/kernel", "fc/weight"):
        np.testing.assert_array_equal(grads[name], 0.0)


def test_trainable_and_depthwise_name_sets():
    arch = parse_arch(MICRO_ARCH_TEXT)
    names = trainable_names(arch)
    assert "conv0/kernel" in names
    assert "bn0/gamma" in names and "bn0/beta" in names
    assert "fc/weight" in names and "fc/bias" in names
    assert not any(n.endswith("/mean") or n.endswith("/var") or n.endswith("/eps") for n in names)
    assert depthwise_kernel_names(arch) == frozenset(["dw1/kernel"])


# --- toy task ----------------------------------------------------------------------


def test_make_toy_batch_shapes_and_determinism():
    a_x, a_y = make_toy_batch(np.random.Generator(np.random.PCG64(5)), 8)
    b_x, b_y = make_toy_batch(np.random.Generator(np.random.PCG64(5)), 8)
    assert a_x.shape == (8, 16, 16, 3)
    assert a_x.dtype == np.float32
    assert a_y.shape == (8,)
    assert set(np.unique(a_y)).issubset({0, 1, 2, 3})
    np.testing.assert_array_equal(a_x, b_x)
    np.testing.assert_array_equal(a_y, b_y)


def test_toy_arch_parses_and_is_small():
    arch = parse_arch(TOY_ARCH_TEXT)
    assert arch.output_classes == 4
    assert arch.input_size == 16


def test_train_toy_zero_lr_is_flat():
    result = train_toy(ToyConfig(steps=20, lr=0.0))
    assert len(set(result.losses)) == 1


def test_train_toy_same_seed_same_curve():
    a = train_toy(ToyConfig(steps=25, seed=3))
    b = train_toy(ToyConfig(steps=25, seed=3))
    assert a.losses == b.losses


def test_train_toy_initial_loss_near_uniform():
    result = train_toy(ToyConfig(steps=2))
    assert abs(result.losses[0] - math.log(4)) < 0.15


def test_train_toy_loss_drops_quickly():
    result = train_toy(ToyConfig(steps=150))
    assert result.losses[-1] < 0.6 * result.losses[0]
    assert result.diverged_at is None
