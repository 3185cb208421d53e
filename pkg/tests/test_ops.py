import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binprune import ops
from binprune.bintensor import pack_bits
from oracles import binary_conv2d_loop, central_difference, rel_err


# -- sign and the straight-through estimator --------------------------------

def test_sign_zero_is_positive():
    assert np.array_equal(ops.sign_forward(np.array([0.0, -0.0, 1e-30, -1e-30])),
                          [1.0, 1.0, 1.0, -1.0])


def test_ste_gate_grid():
    x = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 1.0001, 2.0])
    g = np.ones_like(x)
    out = ops.ste_backward(g, x)
    assert np.array_equal(out, [0, 1, 1, 1, 1, 1, 0, 0])


def test_ste_boundary_inclusive():
    assert ops.ste_backward(np.array([3.0]), np.array([1.0]))[0] == 3.0
    assert ops.ste_backward(np.array([3.0]), np.array([-1.0]))[0] == 3.0


def test_ste_shape_mismatch():
    with pytest.raises(ValueError):
        ops.ste_backward(np.ones(3), np.ones(4))


def test_filter_scales_hand():
    w = np.array([[[[1.0, -3.0], [0.0, 2.0]]], [[[4.0, 4.0], [4.0, 4.0]]]])
    assert np.allclose(ops.filter_scales(w), [1.5, 4.0])


# -- binary convolution, dense path -----------------------------------------

def test_binary_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = ops.sign_forward(rng.normal(size=(2, 3, 6, 6)))
    w = rng.normal(size=(4, 3, 3, 3))
    out, _ = ops.binary_conv2d_dense(x, w, stride=1, pad=1)
    assert np.allclose(out, binary_conv2d_loop(x, w, stride=1, pad=1), atol=1e-12)


def test_binary_conv_strided_matches_loop():
    rng = np.random.default_rng(2)
    x = ops.sign_forward(rng.normal(size=(1, 2, 7, 7)))
    w = rng.normal(size=(3, 2, 3, 3))
    out, _ = ops.binary_conv2d_dense(x, w, stride=2, pad=1)
    assert np.allclose(out, binary_conv2d_loop(x, w, stride=2, pad=1), atol=1e-12)


def test_binary_conv_padding_is_plus_one():
    # With a single +1 weight over an all-(-1) input and pad 1, border
    # outputs see the +1 pad value.
    x = -np.ones((1, 1, 2, 2))
    w = np.ones((1, 1, 3, 3))
    out, _ = ops.binary_conv2d_dense(x, w, stride=1, pad=1)
    # every 3x3 window sees the 4 real -1 pixels plus 5 pad +1 cells
    assert np.all(out == 1.0)
    oracle = binary_conv2d_loop(x, w, stride=1, pad=1)
    assert np.array_equal(out, oracle)


def test_binary_conv_channel_mismatch():
    with pytest.raises(ValueError):
        ops.binary_conv2d_dense(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_binary_conv_integer_exact():
    # The raw +/-1 accumulation must be exact integers.
    rng = np.random.default_rng(5)
    x = ops.sign_forward(rng.normal(size=(2, 8, 5, 5)))
    w = rng.normal(size=(6, 8, 3, 3))
    _, cache = ops.binary_conv2d_dense(x, w, pad=1)
    assert np.array_equal(cache.raw, np.round(cache.raw))


def test_packed_conv_equals_dense():
    rng = np.random.default_rng(9)
    x = ops.sign_forward(rng.normal(size=(2, 3, 6, 6)))
    w = rng.normal(size=(4, 3, 3, 3))
    dense, cache = ops.binary_conv2d_dense(x, w, stride=2, pad=1)
    packed = ops.binary_conv2d_packed(
        pack_bits(x), pack_bits(ops.sign_forward(w)), cache.alpha, stride=2, pad=1
    )
    assert np.array_equal(dense, packed)


def test_packed_conv_alpha_length_check():
    x = pack_bits(np.ones((1, 1, 4, 4)))
    w = pack_bits(np.ones((2, 1, 3, 3)))
    with pytest.raises(ValueError):
        ops.binary_conv2d_packed(x, w, np.ones(3))


# -- binary conv backward: hand chain rule and finite differences -----------

def test_binary_conv_weight_grad_single_element():
    # 1x1 conv over one pixel: out = |w| * sign(w) * x.  The STE term
    # contributes alpha * x = |w| * x, the smooth alpha path contributes
    # sign(w) * x * sign(w) = x, so grad = x * (1 + |w|) for |w| <= 1 and
    # exactly zero outside the clip.
    for w_val in (0.5, -0.5, 1.0, -1.0, 2.0, -2.0):
        x = np.array([[[[3.0]]]])
        w = np.array([[[[w_val]]]])
        out, cache = ops.binary_conv2d_dense(x, w)
        _, grad_w = ops.binary_conv2d_dense_backward(np.ones_like(out), cache)
        expect = 3.0 * (1.0 + abs(w_val)) if abs(w_val) <= 1.0 else 0.0
        assert grad_w[0, 0, 0, 0] == pytest.approx(expect)


def test_binary_conv_latent_weight_outside_clip_gets_zero_grad():
    x = np.ones((1, 1, 1, 1))
    w = np.array([[[[2.0]]]])
    out, cache = ops.binary_conv2d_dense(x, w)
    _, grad_w = ops.binary_conv2d_dense_backward(np.ones_like(out), cache)
    assert grad_w[0, 0, 0, 0] == 0.0


def test_binary_conv_input_grad_scaled_sign():
    # d out / d x = alpha * sign(w) for a 1x1 conv.
    x = np.ones((1, 1, 2, 2))
    w = np.array([[[[-0.25]]]])
    out, cache = ops.binary_conv2d_dense(x, w)
    grad_x, _ = ops.binary_conv2d_dense_backward(np.ones_like(out), cache)
    assert np.allclose(grad_x, -0.25)


def test_binary_conv_weight_grad_decomposition():
    # Sign is piecewise constant, so a finite difference of the real loss
    # only sees the smooth alpha = mean|W| path.  The STE term is linear in
    # the binarized weights, so differencing a frozen-alpha surrogate at
    # W_b recovers it exactly.  Their sum must equal the library gradient
    # when every latent weight sits strictly inside the clip region.
    rng = np.random.default_rng(21)
    x = ops.sign_forward(rng.normal(size=(2, 2, 4, 4)))
    w = rng.uniform(0.1, 0.9, size=(3, 2, 3, 3)) * np.where(
        rng.random((3, 2, 3, 3)) < 0.5, -1.0, 1.0
    )
    g = rng.normal(size=(2, 3, 4, 4))

    out, cache = ops.binary_conv2d_dense(x, w, pad=1)
    _, grad_w = ops.binary_conv2d_dense_backward(g, cache)

    def loss(w_):
        o, _ = ops.binary_conv2d_dense(x, w_, pad=1)
        return float((o * g).sum())

    from oracles import conv2d_loop

    def surrogate(wb):
        o = conv2d_loop(x, wb, stride=1, pad=1, pad_value=1.0)
        return float((o * cache.alpha[None, :, None, None] * g).sum())

    fd_alpha = central_difference(loss, w.copy(), h=1e-4)
    fd_ste = central_difference(surrogate, ops.sign_forward(w), h=1e-3)
    assert rel_err(grad_w, fd_alpha + fd_ste) < 1e-4


# -- full-precision convolution ---------------------------------------------

def test_conv_finite_difference_weights_and_input():
    rng = np.random.default_rng(30)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    g = rng.normal(size=(2, 4, 3, 3))

    def loss_w(w_):
        out, _ = ops.conv2d_forward(x, w_, b, stride=2, pad=1)
        return float((out * g).sum())

    def loss_x(x_):
        out, _ = ops.conv2d_forward(x_, w, b, stride=2, pad=1)
        return float((out * g).sum())

    out, cache = ops.conv2d_forward(x, w, b, stride=2, pad=1)
    grad_x, grad_w_flat, grad_b = ops.conv2d_backward(g, cache, has_bias=True)
    assert rel_err(grad_w_flat.reshape(w.shape), central_difference(loss_w, w.copy())) < 1e-6
    assert rel_err(grad_x, central_difference(loss_x, x.copy())) < 1e-6
    assert np.allclose(grad_b, g.sum(axis=(0, 2, 3)))


# -- batch normalization -----------------------------------------------------

def test_batchnorm_normalizes_batch():
    rng = np.random.default_rng(40)
    x = rng.normal(loc=3.0, scale=2.0, size=(16, 4, 5, 5))
    state = ops.BatchNormState.create(4)
    y, _ = ops.batchnorm_forward(x, state, batch_mode=True)
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batchnorm_eval_uses_running_stats():
    state = ops.BatchNormState.create(2)
    state.running_mean[:] = [1.0, -1.0]
    state.running_var[:] = [4.0, 4.0]
    x = np.zeros((3, 2, 2, 2))
    y, _ = ops.batchnorm_forward(x, state, batch_mode=False)
    assert np.allclose(y[:, 0], -1.0 / np.sqrt(4 + state.epsilon))
    assert np.allclose(y[:, 1], 1.0 / np.sqrt(4 + state.epsilon))
    # eval mode leaves the running stats untouched
    assert np.array_equal(state.running_mean, [1.0, -1.0])


def test_batchnorm_empty_batch():
    with pytest.raises(ValueError):
        ops.batchnorm_forward(np.zeros((0, 2, 2, 2)), ops.BatchNormState.create(2), True)


def test_batchnorm_batch_backward_finite_difference():
    rng = np.random.default_rng(41)
    x = rng.normal(size=(6, 3, 4, 4))
    g = rng.normal(size=x.shape)

    def loss(x_):
        state = ops.BatchNormState.create(3)
        y, _ = ops.batchnorm_forward(x_, state, batch_mode=True)
        return float((y * g).sum())

    state = ops.BatchNormState.create(3)
    y, cache = ops.batchnorm_forward(x, state, batch_mode=True)
    grad = ops.batchnorm_backward(g, cache)
    assert rel_err(grad, central_difference(loss, x.copy())) < 1e-5


def test_batchnorm_eval_backward_is_inv_std_scale():
    rng = np.random.default_rng(42)
    state = ops.BatchNormState.create(2)
    state.running_var[:] = [0.25, 4.0]
    x = rng.normal(size=(3, 2, 2, 2))
    _, cache = ops.batchnorm_forward(x, state, batch_mode=False)
    g = rng.normal(size=x.shape)
    grad = ops.batchnorm_backward(g, cache)
    assert np.allclose(grad, g / np.sqrt(state.running_var + state.epsilon)[None, :, None, None])


# -- pooling, linear, losses -------------------------------------------------

def test_avgpool_hand():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y = ops.avgpool_forward(x, 2)
    assert np.array_equal(y[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_avgpool_backward_finite_difference():
    rng = np.random.default_rng(50)
    x = rng.normal(size=(2, 3, 4, 4))
    g = rng.normal(size=(2, 3, 2, 2))

    def loss(x_):
        return float((ops.avgpool_forward(x_, 2) * g).sum())

    grad = ops.avgpool_backward(g, 2)
    assert rel_err(grad, central_difference(loss, x.copy())) < 1e-8


def test_avgpool_divisibility_check():
    with pytest.raises(ValueError):
        ops.avgpool_forward(np.zeros((1, 1, 5, 5)), 2)


def test_linear_backward_finite_difference():
    rng = np.random.default_rng(51)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(3, 6))
    b = rng.normal(size=3)
    g = rng.normal(size=(4, 3))

    def loss_w(w_):
        return float((ops.linear_forward(x, w_, b) * g).sum())

    grad_x, grad_w, grad_b = ops.linear_backward(g, x, w)
    assert rel_err(grad_w, central_difference(loss_w, w.copy())) < 1e-8
    assert np.allclose(grad_x, g @ w)
    assert np.allclose(grad_b, g.sum(axis=0))


def test_cross_entropy_uniform_logits():
    logits = np.zeros((5, 10))
    loss, _ = ops.softmax_cross_entropy(logits, np.arange(5))
    assert loss == pytest.approx(np.log(10))


def test_cross_entropy_gradient_finite_difference():
    rng = np.random.default_rng(52)
    z = rng.normal(size=(4, 6))
    labels = rng.integers(0, 6, size=4)

    def loss(z_):
        return ops.softmax_cross_entropy(z_, labels)[0]

    _, grad = ops.softmax_cross_entropy(z, labels)
    assert rel_err(grad, central_difference(loss, z.copy())) < 1e-6


def test_cross_entropy_empty_batch():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_softmax_shift_invariance():
    rng = np.random.default_rng(53)
    z = rng.normal(size=(3, 5))
    assert np.allclose(ops.softmax(z), ops.softmax(z + 1000.0))


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_packed_and_dense_agree_property(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    f = int(rng.integers(1, 4))
    x = ops.sign_forward(rng.normal(size=(1, c, 5, 5)))
    w = rng.normal(size=(f, c, 3, 3))
    dense, cache = ops.binary_conv2d_dense(x, w, pad=1)
    packed = ops.binary_conv2d_packed(
        pack_bits(x), pack_bits(ops.sign_forward(w)), cache.alpha, pad=1
    )
    assert np.array_equal(dense, packed)
