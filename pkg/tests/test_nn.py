import math

import numpy as np
import pytest
from conftest import central_diff, rel_err

from semu import nn
from semu.errors import ConfigError, InvalidInputError, NumericalError


def conv_model(seed=0, stride=1, padding=0):
    specs = [nn.LayerSpec.conv2d(2, 3, 3, (6, 5), stride=stride, padding=padding),
             None]
    specs[1] = nn.LayerSpec.dense(specs[0].output_size, 4, "none")
    return nn.init_model(specs, seed)


def naive_conv(x, w, b, spec):
    """Direct loop over output positions, channels and kernel taps."""
    bsz = x.shape[0]
    x = x.reshape(bsz, spec.in_channels, spec.input_h, spec.input_w)
    p = spec.padding
    x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    wk = w.reshape(spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    oh, ow = spec.out_hw
    out = np.zeros((bsz, spec.out_channels, oh, ow))
    for n in range(bsz):
        for o in range(spec.out_channels):
            for i in range(oh):
                for j in range(ow):
                    patch = x[n, :, i * spec.stride:i * spec.stride + spec.kernel_h,
                              j * spec.stride:j * spec.stride + spec.kernel_w]
                    out[n, o, i, j] = np.sum(patch * wk[o]) + b[o]
    return out.reshape(bsz, -1)


def test_dense_forward_hand_example():
    m = nn.init_model([nn.LayerSpec.dense(2, 2, "none")], 0)
    m.layers[0].weight[:] = [[1, 2], [3, 4]]
    m.layers[0].bias[:] = [0.5, -1]
    np.testing.assert_array_equal(nn.forward(m, [[1.0, 1.0]]), [[3.5, 6.0]])


def test_relu_clamps():
    m = nn.init_model([nn.LayerSpec.dense(1, 1, "relu")], 0)
    m.layers[0].weight[:] = 1.0
    np.testing.assert_array_equal(nn.forward(m, [[-2.0], [3.0]]), [[0.0], [3.0]])


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2)])
def test_conv_matches_naive_loop(stride, padding, rng):
    m = conv_model(1, stride, padding)
    layer = m.layers[0]
    layer.bias[:] = rng.standard_normal(layer.bias.shape)
    x = rng.standard_normal((3, layer.spec.input_size))
    z, _ = nn._layer_forward(layer.spec, layer.weight, layer.bias, x)
    np.testing.assert_allclose(z, naive_conv(x, layer.weight, layer.bias, layer.spec), atol=1e-12)


def test_conv_spec_shapes():
    s = nn.LayerSpec.conv2d(3, 8, 3, (32, 32), padding=1)
    assert s.out_hw == (32, 32) and s.weight_shape == (8, 27)
    with pytest.raises(ConfigError):
        nn.LayerSpec.conv2d(1, 1, 5, (3, 3)).validate()


def test_check_spec_rejects_mismatch():
    with pytest.raises(ConfigError, match="do not conform"):
        nn.init_model([nn.LayerSpec.dense(2, 3), nn.LayerSpec.dense(4, 2)], 0)
    with pytest.raises(ConfigError):
        nn.init_model([], 0)


def test_forward_rejects_wrong_width():
    m = nn.init_model(nn.mlp_specs([3, 4, 2]), 0)
    with pytest.raises(InvalidInputError):
        nn.forward(m, np.zeros((2, 5)))


def test_ce_uniform_logits_is_log_c():
    m = nn.init_model([nn.LayerSpec.dense(3, 5, "none")], 0)
    m.layers[0].weight[:] = 0
    loss, _ = nn.backward_ce(m, np.ones((4, 3)), [0, 1, 2, 3])
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_ce_stable_for_large_logits():
    m = nn.init_model([nn.LayerSpec.dense(1, 2, "none")], 0)
    m.layers[0].weight[:] = [[1000.0], [0.0]]
    ce = nn.per_sample_ce(m, [[1.0]], [1])
    assert ce[0] == pytest.approx(1000.0)


def test_ce_rejects_out_of_range_labels():
    m = nn.init_model(nn.mlp_specs([2, 3]), 0)
    with pytest.raises(InvalidInputError):
        nn.per_sample_ce(m, np.zeros((1, 2)), [3])


@pytest.mark.parametrize("seed", range(5))
def test_dense_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = nn.init_model(nn.mlp_specs([3, 5, 4, 3]), seed)
    x, y = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
    _, g = nn.backward_ce(m, x, y)
    fd = central_diff(lambda: nn.backward_ce(m, x, y)[0], nn.model_params(m))
    assert rel_err(nn.grads_list(g), fd) <= 1e-5


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
def test_conv_gradient_matches_finite_differences(stride, padding):
    rng = np.random.default_rng(3)
    m = conv_model(3, stride, padding)
    x, y = rng.standard_normal((2, m.input_size)), rng.integers(0, 4, 2)
    _, g = nn.backward_ce(m, x, y)
    fd = central_diff(lambda: nn.backward_ce(m, x, y)[0], nn.model_params(m))
    assert rel_err(nn.grads_list(g), fd) <= 1e-5


def test_sgd_momentum_hand_example():
    p = np.array([3.0])
    opt = nn.SGD(lr=0.1, momentum=0.9)
    opt.step([p], [np.array([1.0])])
    assert p[0] == pytest.approx(2.9)
    opt.step([p], [np.array([1.0])])
    assert p[0] == pytest.approx(2.9 - 0.19)


def test_sgd_rejects_bad_settings():
    with pytest.raises(ConfigError):
        nn.SGD(0.0)
    with pytest.raises(ConfigError):
        nn.SGD(0.1, momentum=1.0)
    with pytest.raises(InvalidInputError):
        nn.SGD(0.1).step([np.zeros(2)], [np.zeros(3)])


def test_init_is_deterministic_and_seed_sensitive():
    a = nn.init_model(nn.mlp_specs([2, 8, 3]), 5)
    b = nn.init_model(nn.mlp_specs([2, 8, 3]), 5)
    c = nn.init_model(nn.mlp_specs([2, 8, 3]), 6)
    assert all(np.array_equal(p, q) for p, q in zip(nn.model_params(a), nn.model_params(b)))
    assert not np.array_equal(a.layers[0].weight, c.layers[0].weight)
    bound = math.sqrt(6 / 2)
    assert np.all(np.abs(a.layers[0].weight) <= bound) and np.all(a.layers[0].bias == 0)


def test_train_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((120, 2))
    y = (x[:, 0] > 0).astype(int)
    runs = []
    for _ in range(2):
        m = nn.init_model(nn.mlp_specs([2, 16, 2]), 0)
        log = nn.train(m, x, y, epochs=10, lr=0.05, seed=3)
        runs.append((m, log))
    assert runs[0][1][-1]["loss"] < runs[0][1][0]["loss"]
    assert runs[0][1][-1]["accuracy"] > 90
    assert runs[0][1] == runs[1][1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_raises():
    x = np.array([[1e150, 1e150]])
    m = nn.init_model(nn.mlp_specs([2, 2]), 0)
    with pytest.raises(NumericalError):
        nn.train(m, x, [1], epochs=3, lr=1e10, momentum=0.0)


def test_checkpoint_round_trip(tmp_path):
    m = conv_model(2)
    nn.save_checkpoint(tmp_path / "c.json", m, {"note": 1})
    back, extra = nn.load_checkpoint(tmp_path / "c.json")
    assert extra == {"note": 1}
    assert back.specs == m.specs and back.num_classes == m.num_classes and back.seed == m.seed
    for p, q in zip(nn.model_params(m), nn.model_params(back)):
        assert np.array_equal(p, q)


def test_checkpoint_bad_format(tmp_path):
    d = nn.model_to_dict(nn.init_model(nn.mlp_specs([2, 2]), 0))
    d["format"] = "other"
    with pytest.raises(ConfigError):
        nn.model_from_dict(d)
    d["format"] = nn.CKPT_FORMAT
    d["layers"][0]["weight"] = [[1.0]]
    with pytest.raises(ConfigError):
        nn.model_from_dict(d)


def test_gradient_set_algebra():
    m = nn.init_model(nn.mlp_specs([2, 3]), 0)
    z = nn.GradientSet.zeros_like(m)
    one = nn.GradientSet([np.ones_like(w) for w in z.weights], [np.ones_like(b) for b in z.biases])
    s = (one + one).scale(0.5)
    assert all(np.array_equal(a, b) for a, b in zip(nn.grads_list(s), nn.grads_list(one)))


def test_batches_keep_short_tail():
    assert [len(b) for b in nn.batches(10, 4)] == [4, 4, 2]
    idx = np.concatenate(list(nn.batches(10, 3, nn.shuffle_rng(0))))
    assert sorted(idx) == list(range(10))
