import numpy as np
import pytest

from mtseg import tensor as T
from mtseg.losses import dice_loss
from mtseg.resample import bilinear_resize, linear_coeffs
from mtseg.tensor import ShapeError, Tensor, grad_check
from mtseg.unet import (
    UNetConfig,
    build,
    conv_layer_count,
    export_features,
    forward,
)

TINY = UNetConfig(depth=2, base_channels=4, groups=2, dropout_rate=0.0)


def test_default_config_has_15_conv_layers():
    params = build(UNetConfig(), seed=0)
    assert conv_layer_count(params) == 15


def test_parameter_count_closed_form():
    cfg = TINY
    params = build(cfg, seed=0)
    expected = 0
    prev = 1
    widths = [4, 8, 16, 8, 4]           # enc1, enc2, bottleneck, dec2, dec1
    ins = [prev, 4, 8, 16 + 8, 8 + 4]   # decoder blocks read concat(up, skip)
    for cin, cout in zip(ins, widths):
        expected += cout * cin * 9 + cout      # conv1 + bias
        expected += 2 * cout                   # gn1 affine
        expected += cout * cout * 9 + cout     # conv2 + bias
        expected += 2 * cout                   # gn2 affine
    expected += 1 * 4 * 1 + 1                  # 1x1 head
    assert params.size() == expected


def test_build_is_seed_deterministic():
    a = build(TINY, seed=9)
    b = build(TINY, seed=9)
    c = build(TINY, seed=10)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


def test_initial_biases_zero_gains_one():
    params = build(TINY, seed=0)
    for name, t in params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert np.all(t.data == 0)
        if name.endswith(".gamma"):
            assert np.all(t.data == 1)


def test_forward_shapes_and_prob_range(rng):
    params = build(TINY, seed=1)
    x = Tensor(rng.standard_normal((2, 1, 16, 16)).astype(np.float32))
    probs, logits = forward(params, x)
    assert probs.shape == (2, 1, 16, 16)
    assert logits.shape == (2, 1, 16, 16)
    assert np.all(probs.data > 0) and np.all(probs.data < 1)


def test_forward_input_validation(rng):
    params = build(TINY, seed=1)
    with pytest.raises(ShapeError):
        forward(params, Tensor(rng.standard_normal((2, 1, 10, 16))))  # 10 % 4 != 0
    with pytest.raises(ShapeError):
        forward(params, Tensor(rng.standard_normal((2, 3, 16, 16))))
    with pytest.raises(ShapeError):
        forward(params, Tensor(rng.standard_normal((16, 16))))


def test_training_dropout_requires_rng(rng):
    params = build(UNetConfig(depth=2, base_channels=4, groups=2, dropout_rate=0.5), seed=1)
    x = Tensor(rng.standard_normal((1, 1, 16, 16)).astype(np.float32))
    with pytest.raises(ValueError):
        forward(params, x, training=True)
    out, _ = forward(params, x, training=True, drop_rng=np.random.default_rng(0))
    assert out.shape == (1, 1, 16, 16)


def test_eval_forward_is_deterministic(rng):
    params = build(TINY, seed=2)
    x = Tensor(rng.standard_normal((1, 1, 16, 16)).astype(np.float32))
    p1, _ = forward(params, x)
    p2, _ = forward(params, x)
    assert np.array_equal(p1.data, p2.data)


def test_full_net_composite_gradient(rng):
    params = build(TINY, seed=3).astype(np.float64)
    g = Tensor((rng.random((1, 1, 8, 8)) > 0.8).astype(np.float64))
    x0 = rng.standard_normal((1, 1, 8, 8))

    def f(x, *weights):
        probs, _ = forward(params, x, training=False)
        return dice_loss(probs, g)

    x = Tensor(x0, requires_grad=True)
    rep = grad_check(lambda x: f(x), [x])
    assert rep.max_rel_err < 1e-4, rep.max_rel_err


def test_export_features_shape_and_oracle(rng):
    params = build(TINY, seed=4)
    x = Tensor(rng.standard_normal((3, 1, 32, 32)).astype(np.float32))
    feats = export_features(params, x)
    assert feats.shape == (3, 256)
    # independent oracle: per-pixel bilinear interpolation of the logit map
    _, logits = forward(params, x)
    lo, hi, w = linear_coeffs(32, 16)
    one = logits.data[0, 0]
    manual = np.empty((16, 16))
    for r in range(16):
        rowblend = one[lo[r]] * (1 - w[r]) + one[hi[r]] * w[r]
        for c in range(16):
            manual[r, c] = rowblend[lo[c]] * (1 - w[c]) + rowblend[hi[c]] * w[c]
    assert np.allclose(feats[0].reshape(16, 16), manual, atol=1e-5)


def test_export_features_constant_logits():
    # zero-weight head makes every logit the bias value; features follow
    params = build(TINY, seed=5)
    params["head.kernel"].data[:] = 0.0
    params["head.bias"].data[:] = 0.75
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 16, 16)).astype(np.float32))
    feats = export_features(params, x)
    assert np.allclose(feats, 0.75, atol=1e-6)


def test_bilinear_resize_identity_and_mean(rng):
    img = rng.random((1, 1, 8, 8))
    assert np.allclose(bilinear_resize(img, 8, 8), img)
    down = bilinear_resize(img, 4, 4)
    assert down.shape == (1, 1, 4, 4)
    assert abs(down.mean() - img.mean()) < 0.05


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(depth=0)
    with pytest.raises(ValueError):
        UNetConfig(base_channels=6, groups=4)
    with pytest.raises(ValueError):
        UNetConfig(dropout_rate=1.0)
