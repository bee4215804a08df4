import numpy as np
import pytest
from conftest import central_diff, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from semu import core, linalg, nn
from semu.errors import ConfigError


def toy_model(seed=0):
    return nn.init_model(nn.mlp_specs([4, 6, 5, 3]), seed)


def toy_data(seed=0, n=20):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 4)), rng.integers(0, 3, n)


def fake_grads(shapes, fill):
    return nn.GradientSet([fill(s) for s in shapes], [np.zeros(s[0]) for s in shapes])


def test_accumulate_single_batch_is_negated_gradient():
    m = toy_model()
    x, y = toy_data(n=8)
    acc = core.accumulate_forget_gradients(m, x, y, batch_size=64)
    _, g = nn.backward_ce(m, x, y)
    for a, b in zip(acc.weights, g.weights):
        np.testing.assert_array_equal(a, -b)


def test_accumulate_two_identical_batches_doubles():
    m = toy_model()
    x, y = toy_data(n=8)
    one = core.accumulate_forget_gradients(m, x, y, batch_size=8)
    two = core.accumulate_forget_gradients(m, np.vstack([x, x]), np.concatenate([y, y]), batch_size=8)
    for a, b in zip(one.weights, two.weights):
        np.testing.assert_array_equal(2 * a, b)
    mean = core.accumulate_forget_gradients(m, np.vstack([x, x]), np.concatenate([y, y]),
                                            batch_size=8, reduction="mean")
    for a, b in zip(one.weights, mean.weights):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_accumulate_matches_finite_differences():
    m = toy_model(1)
    x, y = toy_data(1, n=10)
    acc = core.accumulate_forget_gradients(m, x, y, batch_size=4)

    def total():
        return -sum(nn.backward_ce(m, x[i], y[i])[0] for i in nn.batches(len(x), 4))

    fd = central_diff(total, [l.weight for l in m.layers])
    assert rel_err(acc.weights, fd) <= 1e-5


def test_accumulate_errors():
    m = toy_model()
    with pytest.raises(ConfigError):
        core.accumulate_forget_gradients(m, np.zeros((0, 4)), np.zeros(0, int))
    with pytest.raises(ConfigError):
        core.accumulate_forget_gradients(m, *toy_data(), reduction="max")


def test_tparams_accounting_example():
    specs = [nn.LayerSpec.dense(50, 100), nn.LayerSpec.dense(100, 20, "relu"), nn.LayerSpec.dense(20, 20, "none")]
    m = nn.init_model(specs, 0)
    rng = np.random.default_rng(0)
    # rank-5 and rank-2 gradients; the middle layer gets no gradient
    g0 = rng.standard_normal((100, 5)) @ rng.standard_normal((5, 50))
    g2 = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 20))
    grads = nn.GradientSet([g0, np.zeros((20, 100)), g2], [np.zeros(100), np.zeros(20), np.zeros(20)])
    cfg = core.SemuConfig(gamma_default=1.0, use_perp_projection=False)
    adapted = core.build_adapters(m, grads, cfg)
    assert [a.rank for a in adapted.adapters] == [5, 2]
    assert adapted.trainable_params == 29
    # the example counts only the two adapted layers (100x50 and 20x20)
    assert 100 * 29 / 5400 == pytest.approx(0.537, abs=5e-4)
    assert core.format_tparams(100 * 29 / 5400) == "0.54%"
    assert adapted.total_params == 5000 + 2000 + 400


def test_identity_at_init_is_bitwise():
    m = toy_model(2)
    x, y = toy_data(2)
    grads = core.accumulate_forget_gradients(m, x, y)
    adapted = core.build_adapters(m, grads, core.SemuConfig(0.9))
    assert adapted.adapters
    for a in adapted.adapters:
        assert np.all(a.r_mat == 0)
        np.testing.assert_allclose(a.u.T @ a.u, np.eye(a.rank), atol=1e-8)
        np.testing.assert_allclose(a.v.T @ a.v, np.eye(a.rank), atol=1e-8)
    probe = np.random.default_rng(9).standard_normal((50, 4))
    assert nn.forward(adapted, probe).tobytes() == nn.forward(m, probe).tobytes()
    merged = core.merge_adapters(adapted)
    for a, b in zip(merged.layers, m.layers):
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)


def test_gamma_zero_freezes_everything():
    m = toy_model()
    grads = core.accumulate_forget_gradients(m, *toy_data())
    adapted = core.build_adapters(m, grads, core.SemuConfig(0.0))
    assert adapted.adapters == [] and adapted.trainable_params == 0 and adapted.tparams_pct == 0


def test_gamma_validation():
    m = toy_model()
    grads = core.accumulate_forget_gradients(m, *toy_data())
    with pytest.raises(ConfigError):
        core.build_adapters(m, grads, core.SemuConfig(1.5))
    with pytest.raises(ConfigError):
        core.build_adapters(m, grads, core.SemuConfig(0.9, gamma_overrides={7: 0.5}))


def test_gamma_override_and_r_max():
    m = toy_model()
    grads = core.accumulate_forget_gradients(m, *toy_data())
    adapted = core.build_adapters(m, grads, core.SemuConfig(1.0, gamma_overrides={1: 0.0}, r_max=2))
    assert [s.r for s in adapted.selections][1] == 0
    assert all(a.rank <= 2 for a in adapted.adapters)


def test_merge_scalar_example():
    spec = nn.LayerSpec.dense(1, 1, "none")
    layer = core.AdapterLayer(spec, np.array([[2.0]]), np.array([[1.0]]), np.array([[1.0]]),
                              np.array([[0.5]]), np.zeros(1))
    adapted = core.AdaptedModel([layer], 1, [])
    assert core.merge_adapters(adapted).layers[0].weight[0, 0] == 2.5


def test_merge_matches_adapted_forward():
    m = toy_model(3)
    grads = core.accumulate_forget_gradients(m, *toy_data(3))
    adapted = core.build_adapters(m, grads, core.SemuConfig(0.99))
    rng = np.random.default_rng(3)
    for a in adapted.adapters:
        a.r_mat[:] = rng.standard_normal(a.r_mat.shape)
    x = rng.standard_normal((100, 4))
    merged = core.merge_adapters(adapted)
    assert np.max(np.abs(nn.forward(merged, x) - nn.forward(adapted, x))) <= 1e-12


def test_r_gradient_matches_finite_differences():
    m = toy_model(4)
    x, y = toy_data(4)
    adapted = core.build_adapters(m, core.accumulate_forget_gradients(m, x, y), core.SemuConfig(0.99))
    rng = np.random.default_rng(4)
    for a in adapted.adapters:
        a.r_mat[:] = 0.1 * rng.standard_normal(a.r_mat.shape)
    _, g = nn.backward_ce(adapted, x, y)
    fd = central_diff(lambda: nn.backward_ce(adapted, x, y)[0], adapted.trainable())
    assert rel_err(adapted.project_grads(g), fd) <= 1e-5


def test_perpendicularity_of_selected_gradient():
    m = toy_model(5)
    grads = core.accumulate_forget_gradients(m, *toy_data(5))
    adapted = core.build_adapters(m, grads, core.SemuConfig(0.9))
    for sel, layer, g in zip(adapted.selections, m.layers, grads.weights):
        inner = linalg.frobenius_inner(sel.projected_grad, layer.weight)
        assert abs(inner) <= 1e-8 * np.linalg.norm(g) * np.linalg.norm(layer.weight)


def test_selected_subspace_captures_gamma():
    m = toy_model(6)
    grads = core.accumulate_forget_gradients(m, *toy_data(6))
    for gamma in (0.3, 0.7, 0.9, 0.99):
        adapted = core.build_adapters(m, grads, core.SemuConfig(gamma))
        for a in adapted.adapters:
            g = adapted.selections[adapted.layers.index(a)].projected_grad
            p = linalg.subspace_project(g, a.u, a.v)
            assert np.sum(p ** 2) / np.sum(g ** 2) >= gamma - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 1), st.floats(0, 1))
def test_monotone_capacity(seed, g1, g2):
    lo, hi = sorted((g1, g2))
    m = toy_model(seed % 7)
    grads = core.accumulate_forget_gradients(m, *toy_data(seed))
    a = core.build_adapters(m, grads, core.SemuConfig(lo))
    b = core.build_adapters(m, grads, core.SemuConfig(hi))
    assert all(sa.r <= sb.r for sa, sb in zip(a.selections, b.selections))
    assert a.trainable_params <= b.trainable_params


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-3, 1e3))
def test_selection_invariant_under_positive_scaling(seed, c):
    m = toy_model(seed % 5)
    grads = core.accumulate_forget_gradients(m, *toy_data(seed))
    a = core.build_adapters(m, grads, core.SemuConfig(0.9))
    b = core.build_adapters(m, grads.scale(c), core.SemuConfig(0.9))
    assert [s.r for s in a.selections] == [s.r for s in b.selections]
    for x, y in zip(a.adapters, b.adapters):
        # compare projectors so the result does not depend on column signs
        np.testing.assert_allclose(x.u @ x.u.T, y.u @ y.u.T, atol=1e-7)


def test_spectrum_diag_example_and_zero_layer():
    m = nn.init_model([nn.LayerSpec.dense(3, 3), nn.LayerSpec.dense(3, 3, "none")], 0)
    grads = nn.GradientSet([np.diag([3.0, 2.0, 1.0]), np.zeros((3, 3))], [np.zeros(3), np.zeros(3)])
    rows = core.spectrum_report(grads, m, core.SemuConfig(0.9, use_perp_projection=False))
    np.testing.assert_allclose(rows[0].explained, [9 / 14, 13 / 14, 1.0])
    assert rows[0].chosen_r == 2 and rows[0].sigma == [3.0, 2.0, 1.0]
    assert rows[1].sigma == [] and rows[1].chosen_r == 0
    lines = core.spectrum_csv(rows).splitlines()
    assert lines[0] == "layer_index,layer_kind,sigma_index,sigma,explained_cum,chosen_r"
    assert len(lines) == 1 + 3 + 1
    assert lines[-1] == "1,dense,,,,0"


def test_spectrum_last_explained_is_one():
    m = toy_model(7)
    grads = core.accumulate_forget_gradients(m, *toy_data(7))
    for row in core.spectrum_report(grads, m, core.SemuConfig(0.9)):
        assert row.explained[-1] == pytest.approx(1.0)


def test_spectrum_is_pure():
    m = toy_model(8)
    before = [l.weight.copy() for l in m.layers]
    grads = core.accumulate_forget_gradients(m, *toy_data(8))
    core.spectrum_report(grads, m, core.SemuConfig(0.9))
    assert all(np.array_equal(a, l.weight) for a, l in zip(before, m.layers))


def test_conv_layer_adapts_natively():
    specs = [nn.LayerSpec.conv2d(1, 4, 3, (5, 5))]
    specs.append(nn.LayerSpec.dense(specs[0].output_size, 3, "none"))
    m = nn.init_model(specs, 0)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((12, 25)), rng.integers(0, 3, 12)
    adapted = core.build_adapters(m, core.accumulate_forget_gradients(m, x, y), core.SemuConfig(0.9))
    conv = adapted.layers[0]
    assert isinstance(conv, core.AdapterLayer) and conv.u.shape[0] == 4 and conv.v.shape[0] == 9
    assert nn.forward(adapted, x).tobytes() == nn.forward(m, x).tobytes()
