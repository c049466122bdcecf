import numpy as np
import pytest

from splitmix.errors import ShapeError
from splitmix.nn import layers as L
from splitmix.nn.model import build_model

RNG = np.random.default_rng(7)


def mlp_arch(hidden=4, inputs=3, classes=2):
    return {"id": "t", "input_shape": [inputs], "num_classes": classes,
            "layers": [{"kind": "dense", "out": hidden}, {"kind": "relu"},
                       {"kind": "dense", "out": classes}]}


def test_zero_weight_model_gives_zero_logits():
    model = build_model(mlp_arch(), init="zeros")
    x = RNG.standard_normal((5, 3))
    assert np.array_equal(model.forward(x), np.zeros((5, 2)))


def test_identity_dense_layer_passes_input_through():
    layer = L.Dense(2, 2)
    layer.w[...] = np.eye(2)
    out = layer.forward(np.array([[1.0, 2.0]]), L.EVAL)
    assert np.array_equal(out, [[1.0, 2.0]])


def test_two_layer_mlp_matches_hand_rolled_matmul():
    model = build_model(mlp_arch(hidden=4, inputs=3, classes=2), seed=3)
    x = RNG.standard_normal((6, 3))
    w1, b1 = model.layers[0].w, model.layers[0].b
    w2, b2 = model.layers[2].w, model.layers[2].b
    h = x @ w1 + b1
    expected = np.maximum(h, 0.0) @ w2 + b2
    np.testing.assert_allclose(model.forward(x), expected, rtol=0, atol=1e-10)


def test_dense_shape_mismatch_raises_structured_error():
    model = build_model(mlp_arch(), seed=0)
    with pytest.raises(ShapeError):
        model.forward(RNG.standard_normal((2, 5)))


def test_conv_forward_matches_direct_convolution():
    conv = L.Conv2d(2, 3, kernel=3, stride=1, pad=1, rng=RNG)
    x = RNG.standard_normal((2, 2, 5, 5))
    out = conv.forward(x, L.EVAL)
    # direct triple loop reference
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for co in range(3):
            for i in range(5):
                for j in range(5):
                    patch = padded[n, :, i:i + 3, j:j + 3]
                    ref[n, co, i, j] = np.sum(patch * conv.w[co]) + conv.b[co]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_maxpool_values_and_backward_routing():
    pool = L.MaxPool2d(2)
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = pool.forward(x, L.EVAL)
    np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])
    dx = pool.backward(np.ones_like(out))
    assert dx.sum() == 4
    assert dx[0, 0, 1, 1] == 1 and dx[0, 0, 0, 0] == 0


# ---------------------------------------------------------------------------
# batch normalization statistics modes

def test_bn_unit_gamma_zero_beta_is_near_identity_on_standardized_input():
    bn = L.BatchNorm(3)
    x = RNG.standard_normal((2048, 3))
    x = (x - x.mean(0)) / x.std(0)
    out = bn.forward(x, L.TRAIN)
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_bn_constant_batch_collapses_to_beta():
    bn = L.BatchNorm(2)
    bn.beta[...] = [0.5, -1.0]
    x = np.full((8, 2), 3.3)
    out = bn.forward(x, L.TRAIN)
    np.testing.assert_allclose(out, np.broadcast_to([0.5, -1.0], (8, 2)), atol=1e-12)


def test_batch_average_mode_identical_in_train_and_eval():
    bn = L.BatchNorm(4, mode="batch_average")
    x = RNG.standard_normal((16, 4))
    np.testing.assert_array_equal(bn.forward(x, L.TRAIN), bn.forward(x, L.EVAL))


def test_tracked_running_stats_match_scalar_ema_oracle():
    bn = L.BatchNorm(1, mode="tracked", momentum=0.1)
    mean_ref, var_ref = 0.0, 1.0
    for step in range(5):
        x = RNG.standard_normal((32, 1)) * (step + 1)
        bn.forward(x, L.TRAIN)
        mean_ref = 0.9 * mean_ref + 0.1 * x.mean()
        var_ref = 0.9 * var_ref + 0.1 * x.var()
    np.testing.assert_allclose(bn.running_mean[0], mean_ref, rtol=1e-12)
    np.testing.assert_allclose(bn.running_var[0], var_ref, rtol=1e-12)


def test_tracked_eval_uses_running_statistics():
    bn = L.BatchNorm(2, mode="tracked")
    x = RNG.standard_normal((64, 2)) + 5.0
    bn.forward(x, L.TRAIN)
    y = bn.forward(x, L.EVAL)
    expected = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    np.testing.assert_allclose(y, expected, rtol=1e-12)


def test_post_average_single_pass_single_batch_equals_batch_stats():
    from splitmix.nn.model import post_average_bn
    arch = {"id": "t", "input_shape": [3], "num_classes": 2,
            "layers": [{"kind": "bn"}, {"kind": "dense", "out": 2}]}
    model = build_model(arch, seed=1, bn_mode="post_average")
    x = RNG.standard_normal((32, 3)) * 2.0 + 1.0
    post_average_bn(model, x, passes=1, batch_size=64)
    bn = model.layers[0]
    np.testing.assert_allclose(bn.running_mean, x.mean(0), rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, x.var(0), rtol=1e-12)
    assert bn.stats_estimated


def test_post_average_multibatch_matches_direct_dataset_statistics():
    from splitmix.nn.model import post_average_bn
    arch = {"id": "t", "input_shape": [3], "num_classes": 2,
            "layers": [{"kind": "bn"}, {"kind": "dense", "out": 2}]}
    model = build_model(arch, seed=1, bn_mode="batch_average")
    x = RNG.standard_normal((100, 3)) * 3.0 - 2.0
    post_average_bn(model, x, passes=20, batch_size=16)
    bn = model.layers[0]
    np.testing.assert_allclose(bn.running_mean, x.mean(0), rtol=1e-10)
    np.testing.assert_allclose(bn.running_var, x.var(0), rtol=1e-10)


def test_post_average_rejects_empty_dataset():
    from splitmix.nn.model import post_average_bn
    model = build_model({"id": "t", "input_shape": [3], "num_classes": 2,
                         "layers": [{"kind": "bn"}, {"kind": "dense", "out": 2}]})
    with pytest.raises(ValueError):
        post_average_bn(model, np.empty((0, 3)))


def test_rescale_layer_scales_outputs_by_inverse_width():
    arch = mlp_arch(hidden=4, inputs=3, classes=2)
    plain = build_model(arch, width=0.5, seed=5, rescale_layer=False)
    scaled = build_model(arch, width=0.5, seed=5, rescale_layer=True)
    x = RNG.standard_normal((4, 3))
    h_plain = plain.layers[0].forward(x, L.EVAL)
    h_scaled = scaled.layers[0].forward(x, L.EVAL)
    np.testing.assert_allclose(h_scaled, 2.0 * h_plain, rtol=1e-12)
