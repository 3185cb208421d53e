import numpy as np
import pytest

from binprune import net, ops
from binprune.masks import FilterMask, MaskMode
from binprune.zoo import ModelSpec, build
from oracles import central_difference, rel_err


def _bin_conv(w, **kw):
    return net.Conv2d(np.asarray(w, dtype=float), None, binary=True, **kw)


# -- individual layers -------------------------------------------------------

def test_sign_act_forward_and_ste():
    layer = net.SignAct()
    x = np.array([[-0.5, 0.0, 1.5]])
    assert np.array_equal(layer.forward(x, True), [[-1.0, 1.0, 1.0]])
    g = layer.backward(np.ones_like(x))
    assert np.array_equal(g, [[1.0, 1.0, 0.0]])


def test_conv_out_mask_gates_channels():
    mask = FilterMask(np.array([0.1, -0.1]), mode=MaskMode.BIN, trainable=True)
    conv = _bin_conv(np.ones((2, 1, 1, 1)), out_mask=mask)
    out = conv.forward(np.ones((1, 1, 2, 2)), training=True)
    assert np.all(out[:, 0] == 1.0)
    assert np.all(out[:, 1] == 0.0)


def test_conv_out_mask_accumulates_grad_o():
    mask = FilterMask(np.array([0.1, -0.1]), mode=MaskMode.BIN, trainable=True)
    conv = _bin_conv(np.full((2, 1, 1, 1), 0.5), out_mask=mask)
    x = np.ones((1, 1, 2, 2))
    out = conv.forward(x, training=True)
    conv.backward(np.ones_like(out))
    # pre-gate output is alpha * (+1 dot) = 0.5 on all 4 positions of both
    # channels, so dL/dO_c = sum(grad * pre) = 2.0 per channel -- including
    # the currently-dropped one.
    assert np.allclose(mask.grad_o, [2.0, 2.0])


def test_feature_mask_grad_o_sees_dropped_channels():
    mask = FilterMask(np.array([0.1, -0.1]), mode=MaskMode.BIN, trainable=True)
    layer = net.FeatureMask(mask)
    x = np.full((1, 2, 2, 2), 3.0)
    out = layer.forward(x, True)
    assert np.all(out[:, 1] == 0.0)
    g = layer.backward(np.ones_like(out))
    assert np.allclose(mask.grad_o, [12.0, 12.0])
    assert np.all(g[:, 1] == 0.0)


def test_conv_in_mask_gather_matches_zero_path():
    # A frozen BIN in-mask gathers surviving channels; the result must match
    # simply zeroing the dropped channels of an fp conv's input.
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 4, 3, 3))
    mask = FilterMask(np.array([0.1, -0.1, 0.2, -0.3]), mode=MaskMode.BIN,
                      trainable=False)
    conv = net.Conv2d(w.copy(), None, binary=False, pad=1, in_mask=mask)
    x = rng.normal(size=(2, 4, 5, 5))
    got = conv.forward(x, False)
    x_zeroed = x * mask.gate().reshape(1, -1, 1, 1)
    expect, _ = ops.conv2d_forward(x_zeroed, w, None, 1, 1)
    assert np.allclose(got, expect, atol=1e-12)


def test_conv_in_mask_gather_gradient_shape():
    mask = FilterMask(np.array([0.1, -0.1, 0.2]), mode=MaskMode.BIN,
                      trainable=False)
    conv = net.Conv2d(np.random.default_rng(1).normal(size=(2, 3, 1, 1)),
                      None, binary=False, in_mask=mask)
    x = np.random.default_rng(2).normal(size=(1, 3, 2, 2))
    out = conv.forward(x, True)
    g = conv.backward(np.ones_like(out))
    assert g.shape == x.shape
    assert np.all(g[:, 1] == 0.0)  # dropped channel gets no gradient
    assert np.all(conv.grad_weight[:, 1] == 0.0)


def test_frozen_conv_accumulates_no_gradient():
    conv = _bin_conv(np.full((2, 1, 3, 3), 0.5), pad=1)
    conv.set_trainable(False)
    x = ops.sign_forward(np.random.default_rng(3).normal(size=(1, 1, 4, 4)))
    out = conv.forward(x, True)
    conv.backward(np.ones_like(out))
    assert np.all(conv.grad_weight == 0.0)


def test_first_layer_skips_input_gradient():
    conv = net.Conv2d(np.ones((1, 1, 1, 1)), None, binary=False, first_layer=True)
    out = conv.forward(np.ones((1, 1, 2, 2)), True)
    g = conv.backward(np.ones_like(out))
    assert g.size == 0


def test_batchnorm_modes_follow_trainable_flag():
    bn = net.BatchNorm(2)
    x = np.random.default_rng(4).normal(loc=5.0, size=(8, 2, 3, 3))
    bn.forward(x, training=True)
    moved = bn.state.running_mean.copy()
    assert not np.allclose(moved, 0.0)
    bn.set_trainable(False)
    bn.forward(x, training=True)  # frozen: stays in running-stats mode
    assert np.array_equal(bn.state.running_mean, moved)


def test_packed_forward_matches_dense_through_layer():
    rng = np.random.default_rng(5)
    mask = FilterMask(np.array([0.1, -0.2, 0.3, 0.4]), mode=MaskMode.BIN,
                      trainable=False)
    conv = _bin_conv(rng.normal(size=(3, 4, 3, 3)), pad=1, in_mask=mask)
    x = ops.sign_forward(rng.normal(size=(2, 4, 5, 5)))
    dense = conv.forward(x, False)
    packed = conv.forward_packed(x)
    assert np.array_equal(dense, packed)


def test_packed_forward_rejects_fp_conv():
    conv = net.Conv2d(np.ones((1, 1, 1, 1)), None, binary=False)
    with pytest.raises(ValueError):
        conv.forward_packed(np.ones((1, 1, 2, 2)))


def test_linear_in_mask_channel_major_expand():
    # 2 channels x 2 positions flattened channel-major; dropping channel 0
    # must zero the first two columns' contribution.
    rng = np.random.default_rng(6)
    w = rng.normal(size=(3, 4))
    mask = FilterMask(np.array([-0.1, 0.1]), mode=MaskMode.BIN, trainable=False)
    lin = net.Linear(w.copy(), np.zeros(3), in_mask=mask, in_expand=2)
    x = rng.normal(size=(2, 4))
    got = lin.forward(x, False)
    expect = ops.linear_forward(x * np.array([0.0, 0.0, 1.0, 1.0]), w, np.zeros(3))
    assert np.allclose(got, expect, atol=1e-12)


def test_global_avgpool_gradient():
    layer = net.GlobalAvgPool()
    x = np.random.default_rng(7).normal(size=(2, 3, 4, 4))
    g = np.random.default_rng(8).normal(size=(2, 3))

    def loss(x_):
        return float((layer.forward(x_, False) * g).sum())

    layer.forward(x, False)
    grad = layer.backward(g)
    assert rel_err(grad, central_difference(loss, x.copy())) < 1e-8


# -- residual block ----------------------------------------------------------

def test_residual_block_output_is_binary():
    spec = ModelSpec("resnet-mini", input_shape=(3, 8, 8), classes=4)
    model = build(spec, seed=0)
    x = np.random.default_rng(9).normal(size=(2, 3, 8, 8))
    out = model.forward(x, training=False)
    assert out.shape == (2, 4)
    # pre-head feature map comes through a sign, so GAP inputs are +/-1
    block_out = None
    h = x
    for layer in model.layers:
        h = layer.forward(h, False)
        if isinstance(layer, net.ResidualBlock):
            block_out = h
    assert np.all(np.abs(block_out) == 1.0)


def test_residual_block_gradient_reaches_both_paths():
    spec = ModelSpec("resnet-mini", input_shape=(3, 8, 8), classes=4)
    model = build(spec, seed=1)
    x = np.random.default_rng(10).normal(size=(2, 3, 8, 8))
    logits = model.forward(x, training=True)
    model.backward(np.ones_like(logits))
    block = next(l for l in model.layers if isinstance(l, net.ResidualBlock))
    assert np.any(block.conv1.grad_weight != 0.0)
    assert np.any(block.conv2.grad_weight != 0.0)
    assert block.shortcut_conv is None or np.any(block.shortcut_conv.grad_weight != 0.0)


# -- network plumbing --------------------------------------------------------

def test_backward_before_forward_raises():
    model = build(ModelSpec("nin-mini", input_shape=(1, 8, 8), classes=3), seed=0)
    with pytest.raises(RuntimeError):
        model.backward(np.ones((1, 3)))


def test_zero_grads_clears_everything():
    model = build(ModelSpec("nin-mini", input_shape=(1, 8, 8), classes=3), seed=0)
    for m in model.masks:
        m.mode = MaskMode.BIN
        m.trainable = True
    x = np.random.default_rng(11).normal(size=(2, 1, 8, 8))
    out = model.forward(x, training=True)
    model.backward(np.ones_like(out))
    model.zero_grads()
    for layer in model.layers:
        for _, _, g in layer.param_items():
            assert np.all(g == 0.0)
    for m in model.masks:
        assert np.all(m.grad_o == 0.0)


def test_masked_equals_shrunk_bitwise():
    # The core pruning invariant: once masks are frozen BIN, evaluating the
    # masked model and the physically shrunk model is bit-identical.
    for arch, shape in (("nin-mini", (3, 8, 8)), ("vgg-mini", (3, 16, 16)),
                        ("resnet-mini", (3, 8, 8))):
        model = build(ModelSpec(arch, input_shape=shape, classes=5), seed=2)
        rng = np.random.default_rng(12)
        for m in model.masks:
            m.m = rng.uniform(-1, 1, size=m.n_filters)
            m.m[rng.integers(0, m.n_filters)] = 1.0  # keep at least one
            m.mode = MaskMode.BIN
            m.trainable = False
        x = rng.normal(size=(3,) + shape)
        masked = model.forward(x, training=False)
        shrunk = model.shrunk().forward(x, training=False)
        assert np.array_equal(masked, shrunk), arch


def test_shrunk_drops_filters_physically():
    model = build(ModelSpec("nin-mini", input_shape=(1, 8, 8), classes=3), seed=3)
    m0 = model.masks[0]
    m0.m = np.where(np.arange(m0.n_filters) < 4, 1.0, -1.0)
    m0.mode = MaskMode.BIN
    for m in model.masks[1:]:
        m.mode = MaskMode.BIN
        m.m = np.ones(m.n_filters)
    small = model.shrunk()
    first_bin = next(l for l in small.layers
                     if isinstance(l, net.Conv2d) and l.binary)
    assert first_bin.weight.shape[0] == 4


# -- optimizer ---------------------------------------------------------------

def test_sgd_step_decay_schedule():
    opt = net.SGD(lr=0.1, decay=0.1, decay_every=20)
    assert opt.lr_at(0) == pytest.approx(0.1)
    assert opt.lr_at(19) == pytest.approx(0.1)
    assert opt.lr_at(20) == pytest.approx(0.01)
    assert opt.lr_at(40) == pytest.approx(0.001)


def test_sgd_plain_update_hand():
    lin = net.Linear(np.ones((1, 1)), np.zeros(1))
    lin.grad_weight[:] = 2.0
    model = net.Network([lin], [], [])
    net.SGD(lr=0.5).step(model, epoch=0)
    assert lin.weight[0, 0] == pytest.approx(0.0)


def test_sgd_momentum_accumulates():
    lin = net.Linear(np.zeros((1, 1)), np.zeros(1))
    model = net.Network([lin], [], [])
    opt = net.SGD(lr=1.0, momentum=0.9)
    lin.grad_weight[:] = 1.0
    opt.step(model, 0)  # v = 1, w = -1
    opt.step(model, 0)  # v = 1.9, w = -2.9
    assert lin.weight[0, 0] == pytest.approx(-2.9)


def test_sgd_skips_frozen_layers():
    lin = net.Linear(np.ones((1, 1)), np.zeros(1))
    lin.set_trainable(False)
    lin.grad_weight[:] = 5.0
    net.SGD(lr=1.0).step(net.Network([lin], [], []), 0)
    assert lin.weight[0, 0] == 1.0
