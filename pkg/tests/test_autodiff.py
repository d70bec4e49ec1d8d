"""Tensor engine: op semantics, gradients vs finite differences, tape rules."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from stormcast import autodiff as ad
from stormcast.autodiff import BatchNormState, Optimizer, Tensor, no_grad, parameter
from stormcast.errors import ConfigError, DataError, DimensionError, UsageError

FD_STEP = 1e-4
FD_TOL = 1e-4


def check_grad(build_loss, params, tol=FD_TOL, step=FD_STEP):
    """Analytic gradients of build_loss() against central differences."""
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    worst = 0.0
    for p, g in zip(params, analytic):
        def value():
            with no_grad():
                return float(build_loss().data)
        fd = oracles.fd_gradient(value, p.data, step=step)
        worst = max(worst, oracles.max_rel_err(g, fd))
    return worst


# ---------------------------------------------------------------------------
# Tensor basics and tape rules


def test_tensor_defaults():
    t = Tensor([1.0, 2.0])
    assert t.data.dtype == np.float64
    assert not t.requires_grad
    assert t.grad is None


def test_backward_requires_scalar():
    x = parameter(np.ones(3))
    y = ad.relu(x)
    with pytest.raises(UsageError):
        y.backward()


def test_backward_sum_is_ones():
    x = parameter(np.random.default_rng(0).normal(size=(3, 4)))
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_elementwise_square():
    x = parameter(np.array([1.0, 2.0]))
    ad.tsum(ad.mul(x, x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0], atol=0, rtol=0)


def test_backward_two_consumers_accumulates():
    # u = x*x and v = x+x both consume x; d/dx [sum(u)+sum(v)] = 2x + 2
    x = parameter(np.array([1.0, 2.0, 3.0]))
    s = ad.add(ad.tsum(ad.mul(x, x)), ad.tsum(ad.add(x, x)))
    s.backward()
    assert np.allclose(x.grad, [4.0, 6.0, 8.0], atol=0, rtol=0)


def test_backward_leaves_unreachable_grads_alone():
    x = parameter(np.ones(2))
    y = parameter(np.ones(2))
    ad.tsum(ad.mul(x, x)).backward()
    assert y.grad is None


def test_no_grad_builds_no_graph():
    x = parameter(np.ones((2, 2)))
    with no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()
    # the flag is restored even when the body raises
    with pytest.raises(RuntimeError):
        with no_grad():
            raise RuntimeError("boom")
    z = ad.mul(x, x)
    assert z.requires_grad


def test_add_broadcast_unbroadcasts_gradient():
    a = parameter(np.zeros((2, 3)))
    b = parameter(np.zeros(3))
    ad.tsum(ad.add(a, b)).backward()
    assert np.array_equal(a.grad, np.ones((2, 3)))
    assert np.array_equal(b.grad, np.full(3, 2.0))


def test_mean_and_reshape_gradients():
    x = parameter(np.arange(6.0).reshape(2, 3))
    ad.tmean(ad.reshape(x, (3, 2))).backward()
    assert np.allclose(x.grad, np.full((2, 3), 1.0 / 6.0), atol=0, rtol=0)


def test_matmul_requires_2d():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones((3, 2)))
    with pytest.raises(DimensionError):
        ad.matmul(a, b)


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4, 2)))
    r = Tensor(rng.normal(size=(3, 2)))
    worst = check_grad(lambda: ad.tsum(ad.mul(ad.matmul(a, b), r)), [a, b])
    assert worst < FD_TOL


# ---------------------------------------------------------------------------
# conv2d


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(2).normal(size=(1, 4, 4)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = ad.conv2d(x, w)
    assert np.array_equal(out.data, x.data)


def test_conv_single_window_example():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = ad.conv2d(x, w)
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 10.0


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 18, 18))
    w = rng.normal(size=(80, 6, 5, 5))
    b = rng.normal(size=80)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    want = oracles.conv2d_loop(x, w, b)
    assert got.shape == (80, 14, 14)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_conv_batched_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 2, 7, 9))
    w = rng.normal(size=(5, 2, 3, 3))
    b = rng.normal(size=5)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.max(np.abs(got - oracles.conv2d_loop(x, w, b))) <= 1e-12


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((2, 2))), Tensor(np.ones((1, 1, 1, 1))))
    with pytest.raises(DimensionError):   # channel mismatch
        ad.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))
    with pytest.raises(DimensionError):   # kernel larger than input
        ad.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(DimensionError):   # non-square kernel
        ad.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 3))))


def test_conv_gradients():
    rng = np.random.default_rng(5)
    x = parameter(rng.normal(size=(2, 3, 6, 6)))
    w = parameter(rng.normal(size=(4, 3, 3, 3)))
    b = parameter(rng.normal(size=4))
    r = Tensor(rng.normal(size=(2, 4, 4, 4)))
    worst = check_grad(lambda: ad.tsum(ad.mul(ad.conv2d(x, w, b), r)), [x, w, b])
    assert worst < FD_TOL


# ---------------------------------------------------------------------------
# linear


def test_linear_identity():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    w = Tensor(np.eye(3))
    b = Tensor(np.zeros(3))
    assert np.array_equal(ad.linear(x, w, b).data, [1.0, 2.0, 3.0])


def test_linear_tiny_example():
    x = Tensor(np.array([2.0, 3.0]))
    w = Tensor(np.array([[1.0, 1.0]]))
    b = Tensor(np.array([5.0]))
    assert np.array_equal(ad.linear(x, w, b).data, [10.0])


def test_linear_matches_loop_oracle():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 50))
    w = rng.normal(size=(64, 50))
    b = rng.normal(size=64)
    got = ad.linear(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.max(np.abs(got - oracles.linear_loop(x, w, b))) <= 1e-12


def test_linear_dimension_error():
    with pytest.raises(DimensionError):
        ad.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 4))))


def test_linear_gradients():
    rng = np.random.default_rng(7)
    x = parameter(rng.normal(size=(3, 5)))
    w = parameter(rng.normal(size=(4, 5)))
    b = parameter(rng.normal(size=4))
    r = Tensor(rng.normal(size=(3, 4)))
    worst = check_grad(lambda: ad.tsum(ad.mul(ad.linear(x, w, b), r)), [x, w, b])
    assert worst < FD_TOL


# ---------------------------------------------------------------------------
# activations


def test_relu_example():
    out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_relu_propagates_non_finite():
    # divergence detection depends on NaN/inf surviving to the loss
    out = ad.relu(Tensor(np.array([np.nan, np.inf, -np.inf, 1.0])))
    assert np.isnan(out.data[0])
    assert np.isposinf(out.data[1])
    assert out.data[2] == 0.0 and out.data[3] == 1.0


def test_softmax_symmetry():
    out = ad.softmax(Tensor(np.array([0.0, 0.0])))
    assert np.allclose(out.data, [0.5, 0.5], atol=0, rtol=0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_simplex(vals):
    out = ad.softmax(Tensor(np.array(vals))).data
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) <= 1e-12


def test_softmax_rows_sum_to_one_2d():
    rng = np.random.default_rng(8)
    out = ad.softmax(Tensor(rng.normal(size=(5, 3))), axis=1).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)


def test_sigmoid_gradient_matches_fd():
    rng = np.random.default_rng(9)
    x = parameter(rng.normal(size=7))
    r = Tensor(rng.normal(size=7))

    def build():
        return ad.tsum(ad.mul(ad.sigmoid(x), r))

    loss = build()
    loss.backward()
    analytic = x.grad.copy()
    x.grad = None

    def value():
        with no_grad():
            return float(build().data)

    fd = oracles.fd_gradient(value, x.data, step=1e-4)
    assert np.max(np.abs(analytic - fd)) <= 1e-6


def test_activation_dispatch_and_gradients():
    rng = np.random.default_rng(10)
    # keep relu inputs away from the kink at zero
    base = rng.normal(size=6)
    base[np.abs(base) < 0.05] = 0.5
    for mode in ("relu", "sigmoid", "tanh", "softmax"):
        x = parameter(base.copy())
        r = Tensor(rng.normal(size=6))
        worst = check_grad(lambda: ad.tsum(ad.mul(ad.activation(x, mode), r)), [x])
        assert worst < FD_TOL, mode
    with pytest.raises(ConfigError):
        ad.activation(Tensor(np.ones(2)), "swish")


# ---------------------------------------------------------------------------
# batch norm


def test_batch_norm_constant_batch_equals_beta():
    state = BatchNormState(3)
    state.beta.data = np.array([1.0, -2.0, 0.5])
    x = Tensor(np.tile(np.array([4.0, 5.0, 6.0]), (4, 1)))
    out = ad.batch_norm(x, state, training=True)
    assert np.allclose(out.data, np.tile(state.beta.data, (4, 1)), atol=1e-12, rtol=0)


def test_batch_norm_normalizes_within_1e9():
    # variance of the output is var/(var+eps); large-scale data makes the
    # eps bias negligible against the 1e-9 tolerance
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(scale=300.0, size=(64, 4, 5, 5)))
    out = ad.batch_norm(x, BatchNormState(4), training=True).data
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.max(np.abs(mean)) <= 1e-9
    assert np.max(np.abs(var - 1.0)) <= 1e-9


def test_batch_norm_running_stats_update():
    state = BatchNormState(2)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(8, 2))
    old_mean = state.running_mean.copy()
    old_var = state.running_var.copy()
    ad.batch_norm(Tensor(x), state, training=True)
    want_mean = 0.9 * old_mean + 0.1 * x.mean(axis=0)
    want_var = 0.9 * old_var + 0.1 * x.var(axis=0)
    assert np.allclose(state.running_mean, want_mean, atol=0, rtol=1e-15)
    assert np.allclose(state.running_var, want_var, atol=0, rtol=1e-15)


def test_batch_norm_infer_matches_hand_computation():
    state = BatchNormState(2)
    state.running_mean = np.array([1.0, -1.0])
    state.running_var = np.array([4.0, 9.0])
    state.gamma.data = np.array([2.0, 0.5])
    state.beta.data = np.array([0.0, 1.0])
    x = np.array([[3.0, 2.0], [1.0, -4.0]])
    out = ad.batch_norm(Tensor(x), state, training=False).data
    want = (x - state.running_mean) / np.sqrt(state.running_var + 1e-5)
    want = want * state.gamma.data + state.beta.data
    assert np.allclose(out, want, atol=1e-15, rtol=0)


def test_batch_norm_infer_mode_never_writes():
    state = BatchNormState(2)
    before_m = state.running_mean.copy()
    before_v = state.running_var.copy()
    ad.batch_norm(Tensor(np.random.default_rng(13).normal(size=(4, 2))),
                  state, training=False)
    assert np.array_equal(state.running_mean, before_m)
    assert np.array_equal(state.running_var, before_v)


def test_batch_norm_singleton_batch_rejected():
    with pytest.raises(ConfigError):
        ad.batch_norm(Tensor(np.ones((1, 3))), BatchNormState(3), training=True)
    # inference mode has no batch-size requirement
    ad.batch_norm(Tensor(np.ones((1, 3))), BatchNormState(3), training=False)


def test_batch_norm_shape_errors():
    with pytest.raises(DimensionError):
        ad.batch_norm(Tensor(np.ones((2, 3, 4))), BatchNormState(3), training=True)
    with pytest.raises(DimensionError):
        ad.batch_norm(Tensor(np.ones((2, 5))), BatchNormState(3), training=True)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    rng = np.random.default_rng(14)
    state = BatchNormState(3)
    state.running_mean = rng.normal(size=3)
    state.running_var = rng.uniform(0.5, 2.0, size=3)
    x = parameter(rng.normal(size=(6, 3, 2, 2)))
    r = Tensor(rng.normal(size=(6, 3, 2, 2)))
    worst = check_grad(
        lambda: ad.tsum(ad.mul(ad.batch_norm(x, state, training), r)),
        [x, state.gamma, state.beta],
    )
    assert worst < FD_TOL


# ---------------------------------------------------------------------------
# max pool


def test_max_pool_example():
    out = ad.max_pool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 4.0


def test_max_pool_tie_routes_to_first_in_scan_order():
    x = parameter(np.ones((1, 1, 2, 2)))
    ad.tsum(ad.max_pool2d(x)).backward()
    assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_matches_loop_oracle():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(48, 8, 8))
    got = ad.max_pool2d(Tensor(x)).data
    assert np.max(np.abs(got - oracles.maxpool_loop(x))) <= 1e-12


def test_max_pool_odd_extent_rejected():
    with pytest.raises(DimensionError):
        ad.max_pool2d(Tensor(np.ones((1, 3, 4))))
    with pytest.raises(ConfigError):
        ad.max_pool2d(Tensor(np.ones((1, 4, 4))), window=3)


def test_max_pool_gradients():
    rng = np.random.default_rng(16)
    x = parameter(rng.normal(size=(2, 3, 4, 4)))
    r = Tensor(rng.normal(size=(2, 3, 2, 2)))
    worst = check_grad(lambda: ad.tsum(ad.mul(ad.max_pool2d(x), r)), [x])
    assert worst < FD_TOL


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_symmetric_logits():
    loss = ad.cross_entropy_with_logits(
        Tensor(np.array([[0.0, 0.0]])), np.array([0])
    )
    assert abs(float(loss.data) - np.log(2.0)) <= 1e-15


def test_cross_entropy_extreme_logits_stay_finite():
    loss = ad.cross_entropy_with_logits(
        Tensor(np.array([[1000.0, 0.0]])), np.array([0])
    )
    v = float(loss.data)
    assert np.isfinite(v)
    assert 0.0 <= v < 1e-6


def test_cross_entropy_label_validation():
    logits = Tensor(np.zeros((2, 2)))
    with pytest.raises(DataError):
        ad.cross_entropy_with_logits(logits, np.array([0, 2]))
    with pytest.raises(DataError):
        ad.cross_entropy_with_logits(logits, np.array([0.0, 1.0]))
    with pytest.raises(DimensionError):
        ad.cross_entropy_with_logits(logits, np.array([0]))


def test_cross_entropy_gradient_matches_fd():
    rng = np.random.default_rng(17)
    logits = parameter(rng.normal(size=(5, 2)))
    labels = np.array([0, 1, 1, 0, 1])

    def build():
        return ad.cross_entropy_with_logits(logits, labels)

    loss = build()
    loss.backward()
    analytic = logits.grad.copy()
    logits.grad = None

    def value():
        with no_grad():
            return float(build().data)

    fd = oracles.fd_gradient(value, logits.data, step=1e-4)
    assert np.max(np.abs(analytic - fd)) <= 1e-5


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_single_step():
    p = parameter(np.array([1.0]))
    p.grad = np.array([2.0])
    Optimizer([p], kind="sgd", lr=0.1).step()
    assert np.allclose(p.data, [0.8], atol=0, rtol=0)


def test_step_without_grad_is_usage_error():
    p = parameter(np.array([1.0]))
    with pytest.raises(UsageError):
        Optimizer([p], kind="sgd", lr=0.1).step()


def test_step_clears_gradients():
    p = parameter(np.array([1.0]))
    p.grad = np.array([2.0])
    opt = Optimizer([p], kind="sgd", lr=0.1)
    opt.step()
    assert p.grad is None


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
def test_adam_first_step_magnitude_is_lr(scale):
    p = parameter(np.array([0.0]))
    p.grad = np.array([scale])
    Optimizer([p], kind="adam", lr=1e-3).step()
    # bias correction makes mhat/sqrt(vhat) = sign(g) up to eps
    assert abs(abs(float(p.data[0])) - 1e-3) < 1e-6


def test_sgd_converges_on_quadratic():
    target = np.array([3.0, -2.0, 0.5])
    p = parameter(np.zeros(3))
    opt = Optimizer([p], kind="sgd", lr=0.1)
    t = Tensor(target)
    for _ in range(200):
        diff = ad.add(p, ad.neg(t))
        loss = ad.mul(ad.tsum(ad.mul(diff, diff)), Tensor(np.asarray(0.5)))
        loss.backward()
        opt.step()
    assert np.max(np.abs(p.data - target)) <= 1e-6


def test_optimizer_config_errors():
    p = parameter(np.ones(1))
    with pytest.raises(ConfigError):
        Optimizer([p], kind="rmsprop")
    with pytest.raises(ConfigError):
        Optimizer([p], lr=0.0)
    with pytest.raises(ConfigError):
        Optimizer([])
