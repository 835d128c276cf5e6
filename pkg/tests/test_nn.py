import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqdnet.nn import functional as F
from pqdnet.nn.gradcheck import check_function, check_layer, numeric_grad, rel_error
from pqdnet.nn.layers import (BatchNorm2d, Conv2d, GlobalAvgPool, HSwish, Linear, ReLU,
                              Sigmoid, Swish)

TOL = 1e-4


def direct_conv(x, w, b, stride, pad, groups):
    """Nested-loop grouped convolution, the reference definition."""
    n, c_in, h, wd = x.shape
    c_out, cg, k, _ = w.shape
    og = c_out // groups
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for ni in range(n):
        for co in range(c_out):
            g = co // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[co]
                    for ci in range(cg):
                        for di in range(k):
                            for dj in range(k):
                                acc += (w[co, ci, di, dj]
                                        * xp[ni, g * cg + ci, i * stride + di, j * stride + dj])
                    out[ni, co, i, j] = acc
    return out


def away_from(x, points, margin=1e-3):
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 1e-12) * margin * 2, x)
    return x


@pytest.mark.parametrize("stride,pad,groups,k", [(1, 1, 2, 3), (2, 1, 2, 3), (1, 0, 4, 1),
                                                 (2, 0, 1, 1), (1, 1, 1, 3), (2, 2, 4, 5)])
def test_conv_matches_direct_loops(stride, pad, groups, k):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 5, 6))
    w = rng.standard_normal((8, 4 // groups, k, k))
    b = rng.standard_normal(8)
    out, _ = F.conv2d_forward(x, w, b, stride, pad, groups)
    np.testing.assert_allclose(out, direct_conv(x, w, b, stride, pad, groups), atol=1e-12)


def test_grouped_equals_dense_when_one_group():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 4, 4))
    w = rng.standard_normal((6, 4, 3, 3))
    grouped, _ = F.conv2d_forward(x, w, None, 1, 1, groups=1)
    np.testing.assert_allclose(grouped, direct_conv(x, w, None, 1, 1, 1), atol=1e-12)


def test_grouped_conv_is_block_diagonal_dense():
    # a grouped conv equals a dense conv whose off-group weights are zero
    rng = np.random.default_rng(2)
    g, c = 2, 4
    x = rng.standard_normal((1, c, 4, 4))
    wg = rng.standard_normal((c, c // g, 3, 3))
    dense = np.zeros((c, c, 3, 3))
    for co in range(c):
        grp = co // (c // g)
        dense[co, grp * (c // g):(grp + 1) * (c // g)] = wg[co]
    a, _ = F.conv2d_forward(x, wg, None, 1, 1, g)
    b, _ = F.conv2d_forward(x, dense, None, 1, 1, 1)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_identity_1x1_grouped_conv():
    x = np.random.default_rng(3).standard_normal((2, 4, 3, 3))
    w = np.zeros((4, 2, 1, 1))
    for co in range(4):
        w[co, co % 2, 0, 0] = 1.0
    out, _ = F.conv2d_forward(x, w, np.zeros(4), 1, 0, groups=2)
    np.testing.assert_array_equal(out, x)


def test_conv_output_size_formula():
    out, _ = F.conv2d_forward(np.zeros((1, 2, 7, 8)), np.zeros((2, 2, 3, 3)), None, 2, 1, 1)
    assert out.shape == (1, 2, 4, 4)


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="groups"):
        F.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((4, 1, 3, 3)), None, 1, 1, 2)
    with pytest.raises(ValueError, match="input channels"):
        F.conv2d_forward(np.zeros((1, 4, 4, 4)), np.zeros((4, 4, 3, 3)), None, 1, 1, 2)
    with pytest.raises(ValueError, match="odd"):
        F.conv2d_forward(np.zeros((1, 4, 4, 4)), np.zeros((4, 4, 2, 2)), None, 1, 1, 1)
    with pytest.raises(ValueError):
        Conv2d(3, 4, 3, groups=2)


def test_conv_parameter_count_reduction():
    for g in (1, 2, 4, 8):
        conv = Conv2d(16, 32, 3, groups=g)
        assert sum(p.size for p in conv.parameters()) == 32 * (16 // g) * 9 + 32
    assert Conv2d(16, 32, 3, groups=4).weight.size * 4 == Conv2d(16, 32, 3).weight.size


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("stride,groups,k", [(1, 2, 3), (2, 2, 3), (2, 1, 1), (1, 4, 1)])
def test_conv_gradients(seed, stride, groups, k):
    rng = np.random.default_rng(seed)
    layer = Conv2d(4, 8, k, stride=stride, groups=groups, rng=rng, dtype=np.float64)
    layer.bias.value = rng.standard_normal(8)
    rep = check_layer(layer, rng.standard_normal((2, 4, 5, 5)), rng=seed, tolerance=TOL)
    assert rep.passed, rep.errors


def test_batchnorm_identity_on_normalized_batch():
    x = np.random.default_rng(0).standard_normal((4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    bn = BatchNorm2d(3, dtype=np.float64)
    np.testing.assert_allclose(bn.forward(x), x, atol=1e-4)


def test_batchnorm_zero_gamma():
    bn = BatchNorm2d(3, dtype=np.float64)
    bn.gamma.value[:] = 0
    assert not bn.forward(np.random.default_rng(0).standard_normal((2, 3, 4, 4))).any()


def test_batchnorm_matches_two_pass_formula():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2, 4, 4)) * 3 + 1
    bn = BatchNorm2d(2, dtype=np.float64)
    bn.gamma.value = np.array([0.5, 2.0])
    bn.beta.value = np.array([-1.0, 0.25])
    out = bn.forward(x)
    for c in range(2):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        expect = (x[:, c] - mu) / math.sqrt(var + 1e-5) * bn.gamma.value[c] + bn.beta.value[c]
        np.testing.assert_allclose(out[:, c], expect, atol=1e-12)
        m = len(vals)
        assert bn.running_mean[c] == pytest.approx(0.1 * mu)
        assert bn.running_var[c] == pytest.approx(0.9 + 0.1 * var * m / (m - 1))


def test_batchnorm_inference_uses_initial_stats():
    bn = BatchNorm2d(2, dtype=np.float64).eval()
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
    np.testing.assert_allclose(bn.forward(x), x / math.sqrt(1 + 1e-5))
    assert not bn.running_mean.any()


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(seed, training):
    rng = np.random.default_rng(seed)
    bn = BatchNorm2d(3, dtype=np.float64)
    bn.gamma.value = rng.uniform(0.5, 2, 3)
    bn.beta.value = rng.standard_normal(3)
    bn.running_mean = rng.standard_normal(3)
    bn.running_var = rng.uniform(0.5, 2, 3)
    bn.train(training)
    rep = check_layer(bn, rng.standard_normal((3, 3, 4, 4)) * 2 + 0.5, rng=seed, tolerance=TOL)
    assert rep.passed, rep.errors


def test_hswish_values():
    out, _ = F.hswish_forward(np.array([0.0, 3.0, -3.0, 1.0, 9.0, -5.0]))
    np.testing.assert_allclose(out, [0, 3, 0, 2 / 3, 9, 0])


def test_hswish_derivative_pieces():
    g = F.hswish_backward(np.ones(4), np.array([-4.0, 4.0, 0.0, 1.5]))
    np.testing.assert_allclose(g, [0, 1, 0.5, 1.0])


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("layer_cls", [HSwish, Swish, Sigmoid, ReLU])
def test_activation_gradients(seed, layer_cls):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-6, 6, (2, 3, 4, 4))
    x = away_from(x, (-3.0, 0.0, 3.0))
    rep = check_layer(layer_cls(), x, rng=seed, tolerance=1e-6 if layer_cls is not ReLU else TOL)
    assert rep.passed, rep.errors


def test_sigmoid_and_swish_identities():
    x = np.random.default_rng(0).standard_normal(100) * 10
    np.testing.assert_allclose(F.sigmoid(x) + F.sigmoid(-x), 1.0, atol=1e-15)
    assert F.sigmoid(np.array([0.0]))[0] == 0.5
    assert F.swish_forward(np.array([0.0]))[0][0] == 0.0
    big = F.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0


def test_relu_and_pool_values():
    np.testing.assert_array_equal(F.relu_forward(np.array([-1.0, 2.0]))[0], [0.0, 2.0])
    pooled, _ = F.global_avg_pool_forward(np.full((2, 3, 4, 5), 1.75))
    np.testing.assert_array_equal(pooled, np.full((2, 3), 1.75))


@pytest.mark.parametrize("seed", range(20))
def test_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    rep = check_layer(GlobalAvgPool(), rng.standard_normal((2, 3, 4, 5)), rng=seed)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("seed", range(20))
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = Linear(5, 4, rng=rng, dtype=np.float64)
    layer.bias.value = rng.standard_normal(4)
    rep = check_layer(layer, rng.standard_normal((3, 5)), rng=seed, tolerance=1e-7)
    assert rep.passed, rep.errors


def test_linear_gradients_float32():
    # 32-bit forward, float64 finite differences of the same float32 weights
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5)).astype(np.float32)
    w = rng.standard_normal((4, 5)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    up = rng.standard_normal((3, 4)).astype(np.float32)
    _, cache = F.linear_forward(x, w, b)
    _, dw, _ = F.linear_backward(up, cache)
    assert dw.dtype == np.float32
    w64 = w.astype(np.float64)
    num = numeric_grad(lambda: float(np.sum(F.linear_forward(x.astype(np.float64), w64,
                                                             b.astype(np.float64))[0] * up)),
                       w64, h=1e-3)
    assert rel_error(dw, num) < 1e-4


def test_linear_shape_error():
    with pytest.raises(ValueError):
        Linear(5, 4).forward(np.zeros((2, 3), np.float32))


def test_residual_add():
    np.testing.assert_array_equal(F.residual_add(np.ones(3), np.ones(3)), 2 * np.ones(3))
    with pytest.raises(ValueError):
        F.residual_add(np.ones(3), np.ones(4))


def test_cross_entropy_values():
    loss, _ = F.softmax_cross_entropy(np.zeros((4, 18)), np.arange(4))
    assert loss == pytest.approx(math.log(18))
    assert round(loss, 4) == 2.8904
    logits = np.zeros((1, 18))
    logits[0, 7] = 50
    loss, _ = F.softmax_cross_entropy(logits, [7])
    assert loss < 1e-9
    with pytest.raises(ValueError):
        F.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 6)) * 3
    labels = rng.integers(0, 6, 4)
    loss, grad = F.softmax_cross_entropy(logits, labels)
    onehot = np.eye(6)[labels]
    np.testing.assert_allclose(grad, (F.softmax(logits) - onehot) / 4, atol=1e-15)
    num = numeric_grad(lambda: F.softmax_cross_entropy(logits, labels)[0], logits)
    assert rel_error(grad, num) < 1e-7


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 20))
def test_cross_entropy_nonnegative(seed, c):
    rng = np.random.default_rng(seed)
    loss, _ = F.softmax_cross_entropy(rng.standard_normal((3, c)) * 10, rng.integers(0, c, 3))
    assert loss >= 0


def test_gradcheck_linear_op_is_exact():
    rep = check_function(lambda a: 3.0 * a, lambda up, a: [3.0 * up],
                         [np.random.default_rng(0).standard_normal(10)], name="scale")
    assert rep.max_error < 1e-9


def test_gradcheck_flags_wrong_gradient():
    rep = check_function(lambda a: a ** 2, lambda up, a: [up * a],
                         [np.random.default_rng(0).standard_normal(10)], name="bad")
    assert not rep.passed
    assert rep.failures() == ["arg0"]


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    layer = Conv2d(4, 4, 3, groups=2, rng=rng)
    x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(layer.forward(x), layer.forward(x))


def test_float32_stays_float32():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    for layer in (Conv2d(4, 4, 3, groups=2), BatchNorm2d(4), HSwish(), Swish(), Sigmoid(),
                  ReLU()):
        out = layer.forward(x)
        assert out.dtype == np.float32, type(layer)
        assert layer.backward(np.ones_like(out)).dtype == np.float32, type(layer)
