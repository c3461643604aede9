import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpnas import tensor as T
from cpnas.tensor import ConvSpec, ShapeError

from conftest import central_diff, rel_err
from helpers import naive_conv, naive_pool


# ---------------------------------------------------------------- conv forward


@settings(max_examples=40, deadline=None)
@given(
    c=st.sampled_from([1, 2, 4]),
    mult=st.sampled_from([1, 2]),
    k=st.sampled_from([1, 3, 5]),
    stride=st.sampled_from([1, 2]),
    dilation=st.sampled_from([1, 2]),
    grouped=st.sampled_from(["dense", "depthwise", "two"]),
    h=st.integers(3, 7),
    w=st.integers(3, 7),
    seed=st.integers(0, 2**16),
)
def test_conv_matches_naive_oracle_exactly_on_integer_data(c, mult, k, stride, dilation, grouped, h, w, seed):
    groups = {"dense": 1, "depthwise": c, "two": 2 if c % 2 == 0 else 1}[grouped]
    out_c = c * mult if grouped != "depthwise" else c
    spec = ConvSpec(c, out_c, k, stride, dilation, groups)
    r = np.random.default_rng(seed)
    with T.precision(64):
        x = r.integers(-3, 4, (2, c, h, w)).astype(np.float64)
        wt = r.integers(-3, 4, spec.weight_shape).astype(np.float64)
        got = T.conv2d_forward(x, wt, spec)
    want = naive_conv(x, wt, stride, dilation, spec.padding, groups)
    assert got.shape == want.shape
    assert np.array_equal(got, want)


def test_conv_gaussian_inputs_agree_to_rounding(f64, rng):
    spec = ConvSpec(3, 5, 3, 2, 1)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=spec.weight_shape)
    np.testing.assert_allclose(T.conv2d_forward(x, w, spec), naive_conv(x, w, 2, 1, 1), rtol=0, atol=1e-12)


def test_depthwise_equals_per_channel_convolution(f64, rng):
    spec = ConvSpec(4, 4, 3, 1, 2, groups=4)
    x = rng.normal(size=(2, 4, 6, 6))
    w = rng.normal(size=spec.weight_shape)
    got = T.conv2d_forward(x, w, spec)
    one = ConvSpec(1, 1, 3, 1, 2)
    for ch in range(4):
        ref = T.conv2d_forward(x[:, ch : ch + 1], w[ch : ch + 1], one)
        np.testing.assert_allclose(got[:, ch : ch + 1], ref, atol=1e-13)


def test_identity_kernel_passes_input():
    spec = ConvSpec(1, 1, 1)
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    np.testing.assert_array_equal(T.conv2d_forward(x, np.ones((1, 1, 1, 1)), spec), x)


def test_conv_shape_errors_name_dimension():
    spec = ConvSpec(3, 4, 3)
    with pytest.raises(ShapeError) as e:
        T.conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros(spec.weight_shape), spec)
    assert e.value.dim == "input channels"
    with pytest.raises(ShapeError):
        T.conv2d_forward(np.zeros((1, 3, 5, 5)), np.zeros((4, 3, 5, 5)), spec)
    with pytest.raises(ValueError):
        ConvSpec(3, 4, 2)
    with pytest.raises(ValueError):
        ConvSpec(3, 4, 3, groups=2)


def test_conv_forward_is_deterministic(rng):
    spec = ConvSpec(4, 4, 5, 1, 2, groups=4)
    x = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    w = rng.normal(size=spec.weight_shape).astype(np.float32)
    assert T.conv2d_forward(x, w, spec).tobytes() == T.conv2d_forward(x.copy(), w.copy(), spec).tobytes()


# ---------------------------------------------------------------- conv backward


def test_conv_backward_zero_grad_gives_zero(f64, rng):
    spec = ConvSpec(2, 3, 3)
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=spec.weight_shape)
    gx, gw = T.conv2d_backward(np.zeros((1, 3, 4, 4)), x, w, spec)
    assert not gx.any() and not gw.any()


def test_conv_backward_scalar_chain_rule(f64):
    spec = ConvSpec(1, 1, 1)
    x = np.array([[[[2.5]]]])
    w = np.array([[[[-1.5]]]])
    gx, gw = T.conv2d_backward(np.array([[[[0.7]]]]), x, w, spec)
    assert gx[0, 0, 0, 0] == pytest.approx(0.7 * -1.5)
    assert gw[0, 0, 0, 0] == pytest.approx(2.5 * 0.7)


@pytest.mark.parametrize(
    "spec",
    [
        ConvSpec(2, 3, 3, 1, 1),
        ConvSpec(2, 3, 3, 2, 1),
        ConvSpec(3, 3, 5, 2, 2, groups=3),
        ConvSpec(3, 3, 3, 1, 2, groups=3),
        ConvSpec(4, 2, 3, 1, 1, groups=2),
        ConvSpec(3, 4, 1, 2, 1, padding=0),
    ],
    ids=["dense", "dense-s2", "dw5-s2-d2", "dw3-d2", "grouped", "pointwise-s2"],
)
def test_conv_backward_matches_finite_differences(f64, rng, spec):
    x = rng.normal(size=(2, spec.in_channels, 6, 5))
    w = rng.normal(size=spec.weight_shape)
    out = T.conv2d_forward(x, w, spec)
    r = rng.normal(size=out.shape)
    loss = lambda: float(np.sum(r * T.conv2d_forward(x, w, spec)))  # noqa: E731
    gx, gw = T.conv2d_backward(r, x, w, spec)
    assert rel_err(gx, central_diff(loss, x)) < 1e-6
    assert rel_err(gw, central_diff(loss, w)) < 1e-6


# ---------------------------------------------------------------- pooling


@pytest.mark.parametrize("pool", [T.max_pool3x3, T.avg_pool3x3])
def test_pool_constant_input(pool):
    x = np.full((1, 2, 5, 5), 3.0)
    out = pool(x, 1)
    if pool is T.max_pool3x3:
        assert np.all(out == 3.0)
    else:
        # interior windows are constant; border windows include padded zeros
        assert np.all(out[:, :, 1:-1, 1:-1] == 3.0)


def test_pool_window_arithmetic():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    assert T.max_pool3x3(x, 1)[0, 0, 1, 1] == 9
    assert T.avg_pool3x3(x, 1)[0, 0, 1, 1] == 5


@pytest.mark.parametrize("stride", [1, 2])
def test_pools_match_naive_oracle(f64, rng, stride):
    x = rng.normal(size=(2, 4, 9, 9))
    np.testing.assert_array_equal(T.max_pool3x3(x, stride), naive_pool(x, stride, "max"))
    np.testing.assert_allclose(T.avg_pool3x3(x, stride), naive_pool(x, stride, "avg"), atol=1e-15)


def test_max_pool_ties_route_gradient_to_first_element():
    x = np.ones((1, 1, 3, 3))
    g = np.zeros((1, 1, 2, 2))
    g[0, 0, 0, 0] = 1.0
    gx = T.max_pool3x3_backward(g, x, 2)
    # window of output (0,0) covers rows/cols -1..1; first valid element is (0,0)
    assert gx[0, 0, 0, 0] == 1.0 and gx.sum() == 1.0


@pytest.mark.parametrize("stride", [1, 2])
def test_pool_backward_matches_finite_differences(f64, rng, stride):
    x = rng.normal(size=(2, 3, 6, 7))
    r = rng.normal(size=T.max_pool3x3(x, stride).shape)
    gmax = T.max_pool3x3_backward(r, x, stride)
    assert rel_err(gmax, central_diff(lambda: float(np.sum(r * T.max_pool3x3(x, stride))), x)) < 1e-6
    gavg = T.avg_pool3x3_backward(r, x.shape, stride)
    assert rel_err(gavg, central_diff(lambda: float(np.sum(r * T.avg_pool3x3(x, stride))), x)) < 1e-6


def test_avg_pool_backward_conserves_interior_mass():
    g = np.ones((1, 1, 6, 6))
    gx = T.avg_pool3x3_backward(g, (1, 1, 6, 6), 1)
    # an interior input pixel belongs to 9 windows, each passing 1/9
    np.testing.assert_allclose(gx[0, 0, 1:-1, 1:-1], 1.0)
    assert gx.sum() <= g.sum()


def test_pool_rejects_bad_stride():
    with pytest.raises(ValueError):
        T.max_pool3x3(np.zeros((1, 1, 4, 4)), 3)


# ---------------------------------------------------------------- batch norm


def test_batch_norm_normalizes(f64, rng):
    st_ = T.BatchNormState(3)
    x = rng.normal(2.0, 3.0, size=(8, 3, 4, 4))
    out, _ = T.batch_norm(x, st_, True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batch_norm_zero_gamma_gives_beta(f64, rng):
    st_ = T.BatchNormState(2)
    st_.gamma.data[:] = 0
    st_.beta.data[:] = [0.5, -1.5]
    out, _ = T.batch_norm(rng.normal(size=(4, 2, 3, 3)), st_, True)
    assert np.all(out[:, 0] == 0.5) and np.all(out[:, 1] == -1.5)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_backward_matches_finite_differences(f64, rng, training):
    st_ = T.BatchNormState(3)
    st_.gamma.data[:] = rng.normal(size=3)
    st_.beta.data[:] = rng.normal(size=3)
    st_.running_mean[:] = rng.normal(size=3)
    st_.running_var[:] = rng.uniform(0.5, 2, size=3)
    x = rng.normal(size=(4, 3, 3, 2))
    r = rng.normal(size=x.shape)
    saved = (st_.running_mean.copy(), st_.running_var.copy())

    def loss():
        st_.running_mean, st_.running_var = saved[0].copy(), saved[1].copy()
        return float(np.sum(r * T.batch_norm(x, st_, training)[0]))

    _, cache = T.batch_norm(x, st_, training)
    gx = T.batch_norm_backward(r, st_, cache)
    assert rel_err(gx, central_diff(loss, x)) < 1e-5
    assert rel_err(st_.gamma.grad, central_diff(loss, st_.gamma.data)) < 1e-5
    assert rel_err(st_.beta.grad, central_diff(loss, st_.beta.data)) < 1e-5


def test_batch_norm_eval_uses_running_stats(f64):
    st_ = T.BatchNormState(1)
    st_.running_mean[:] = 2.0
    st_.running_var[:] = 4.0 - st_.eps
    out, _ = T.batch_norm(np.full((1, 1, 1, 1), 6.0), st_, False)
    assert out[0, 0, 0, 0] == pytest.approx(2.0)


# ---------------------------------------------------------------- dense pieces


def test_linear_and_gap_backward(f64, rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=5)
    r = rng.normal(size=(3, 5))
    gx, gw, gb = T.linear_backward(r, x, w)
    loss = lambda: float(np.sum(r * T.linear_forward(x, w, b)))  # noqa: E731
    assert rel_err(gx, central_diff(loss, x)) < 1e-6
    assert rel_err(gw, central_diff(loss, w)) < 1e-6
    assert rel_err(gb, central_diff(loss, b)) < 1e-6
    f = rng.normal(size=(2, 3, 4, 4))
    q = rng.normal(size=(2, 3))
    g = T.global_avg_pool_backward(q, f.shape)
    assert rel_err(g, central_diff(lambda: float(np.sum(q * T.global_avg_pool(f))), f)) < 1e-6


def test_relu_backward(f64, rng):
    x = rng.normal(size=(3, 7))
    r = rng.normal(size=x.shape)
    assert rel_err(T.relu_backward(r, x), central_diff(lambda: float(np.sum(r * T.relu(x))), x)) < 1e-6


def test_cross_entropy_uniform_logits_is_log_c():
    loss, _ = T.softmax_cross_entropy(np.zeros((4, 10)), [0, 3, 5, 9])
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_peaked_logits_near_zero():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 50
    assert T.softmax_cross_entropy(logits, [1, 2])[0] < 1e-12


def test_cross_entropy_matches_high_precision_oracle(f64, rng):
    logits = rng.normal(size=(4, 10)) * 3
    labels = [1, 0, 9, 4]
    loss, grad = T.softmax_cross_entropy(logits, labels)
    from decimal import Decimal, getcontext

    getcontext().prec = 50
    total = Decimal(0)
    for row, y in zip(logits, labels):
        s = sum(Decimal(float(v)).exp() for v in row)
        total += s.ln() - Decimal(float(row[y]))
    assert abs(loss - float(total / 4)) < 1e-10
    assert rel_err(grad, central_diff(lambda: T.softmax_cross_entropy(logits, labels)[0], logits)) < 1e-6


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ShapeError):
        T.softmax_cross_entropy(np.zeros((2, 3)), [0])


# ---------------------------------------------------------------- optimisation


def test_sgd_plain_step():
    p, g, v = np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.zeros(2)
    T.sgd_step([p], [g], [v], 0.1, 0.0, 0.0)
    np.testing.assert_allclose(p, [0.95, 2.1])


def test_sgd_fixed_point():
    p = np.array([1.0])
    T.sgd_step([p], [np.zeros(1)], [np.zeros(1)], 0.1, 0.9, 0.0)
    assert p[0] == 1.0


def test_sgd_two_step_momentum_recurrence():
    lr, mu, wd = Fraction(1, 10), Fraction(9, 10), Fraction(1, 100)
    p = np.array([1.0])
    v = np.zeros(1)
    grads = [0.5, -0.25]
    P, V = Fraction(1), Fraction(0)
    for g in grads:
        T.sgd_step([p], [np.array([g])], [v], float(lr), float(mu), float(wd))
        V = mu * V + Fraction(g) + wd * P
        P = P - lr * V
    assert p[0] == pytest.approx(float(P), abs=1e-15)


def test_cosine_lr_points():
    assert T.cosine_lr(0, 10, 0.025) == 0.025
    assert T.cosine_lr(5, 10, 0.025) == pytest.approx(0.0125)
    assert T.cosine_lr(9999, 10000, 1.0) < 1e-6
    with pytest.raises(ValueError):
        T.cosine_lr(0, 0, 1.0)


def test_clip_grad_norm():
    p = T.Parameter(np.zeros(2))
    p.grad[:] = [3.0, 4.0]
    assert T.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)


def test_precision_modes():
    with T.precision(64):
        assert T.Parameter([1.0]).data.dtype == np.float64
    assert T.Parameter([1.0]).data.dtype == np.float32
    with pytest.raises(ValueError):
        T.set_precision(16)
