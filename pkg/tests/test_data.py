import time

import numpy as np
import pytest

from semu import nn
from semu.data import Dataset, ParseError, load_csv, make_blobs, split_forget, write_csv
from semu.errors import ConfigError, InvalidInputError


def test_blobs_sizes_and_stratification():
    train, test = make_blobs(num_classes=8, per_class=100, seed=0)
    assert len(train) == 640 and len(test) == 160
    assert np.all(np.bincount(train.y) == 80) and np.all(np.bincount(test.y) == 20)


def test_blobs_deterministic():
    a, _ = make_blobs(seed=3)
    b, _ = make_blobs(seed=3)
    c, _ = make_blobs(seed=4)
    assert np.array_equal(a.x, b.x) and not np.array_equal(a.x, c.x)


def test_blobs_degenerate_clusters_are_linearly_separable():
    train, test = make_blobs(num_classes=4, per_class=20, sigma=0.0, seed=0)
    m = nn.init_model([nn.LayerSpec.dense(2, 4, "none")], 0)
    # nearest-center classifier written as a linear map
    centers = np.array([train.x[train.y == k][0] for k in range(4)])
    m.layers[0].weight[:] = centers
    m.layers[0].bias[:] = -0.5 * np.sum(centers ** 2, axis=1)
    assert nn.accuracy_of(m, test.x, test.y) == 100


def test_blobs_infeasible(monkeypatch):
    class Stuck:
        """Proposes the same center forever, so the second class can never be placed."""

        def uniform(self, lo, hi, size):
            return np.zeros(size)

    import semu.data
    monkeypatch.setattr(semu.data.np.random, "default_rng", lambda seed: Stuck())
    with pytest.raises(ConfigError, match="1000 attempts"):
        make_blobs(num_classes=2, seed=0)


def test_default_blobs_mlp_accuracy():
    train, test = make_blobs(num_classes=8, per_class=250, sigma=0.5, seed=0)
    m = nn.init_model(nn.mlp_specs([2, 64, 64, 8]), 0)
    nn.train(m, train.x, train.y, epochs=40, lr=0.02)
    assert nn.accuracy_of(m, test.x, test.y) >= 97


def test_csv_round_trip(tmp_path):
    d = Dataset(np.array([[0.1, -2.0], [3.5, 1e-7]]), [0, 1])
    write_csv(tmp_path / "d.csv", d)
    back = load_csv(tmp_path / "d.csv")
    assert np.array_equal(back.x, d.x) and np.array_equal(back.y, d.y)


def test_csv_label_remap(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label,b\n1,7,2\n3,3,4\n5,7,6\n")
    d = load_csv(p)
    assert d.label_map == {3: 0, 7: 1}
    assert d.y.tolist() == [1, 0, 1] and d.x.tolist() == [[1, 2], [3, 4], [5, 6]]


@pytest.mark.parametrize("text,match", [
    ("a,b\n1,2\n", "missing label column"),
    ("a,label\n1,0\n2\n", ":3:"),
    ("a,label\n1,0\nx,1\n", ":3: non-numeric"),
    ("", "empty file"),
    ("a,label\n1,0.5\n", "integers"),
])
def test_csv_errors(tmp_path, text, match):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(ParseError, match=match):
        load_csv(p)


def test_csv_parse_speed(tmp_path):
    rng = np.random.default_rng(0)
    d = Dataset(rng.standard_normal((10_000, 4)), rng.integers(0, 5, 10_000))
    write_csv(tmp_path / "big.csv", d)
    start = time.perf_counter()
    back = load_csv(tmp_path / "big.csv")
    assert time.perf_counter() - start < 1.0
    assert len(back) == 10_000


def _train(n=1000, classes=5):
    return Dataset(np.zeros((n, 1)), np.arange(n) % classes)


def test_split_random_fraction():
    train = _train()
    s = split_forget(train, train, "random_fraction", 0.1, seed=0)
    assert len(s.forget_idx) == 100 and len(s.remain_idx) == 900
    a = split_forget(train, train, "random_fraction", 0.5, seed=1)
    b = split_forget(train, train, "random_fraction", 0.5, seed=2)
    assert len(a.forget_idx) == len(b.forget_idx) and not np.array_equal(a.forget_idx, b.forget_idx)


def test_split_class_wise():
    train = _train()
    s = split_forget(train, train, "class_wise", 3)
    assert np.all(s.forget.y == 3) and not np.any(s.remain.y == 3)
    assert len(s.forget) == 200


def test_split_errors():
    train = _train()
    with pytest.raises(ConfigError):
        split_forget(train, train, "class_wise", 9)
    with pytest.raises(ConfigError):
        split_forget(train, train, "random_fraction", 1.5)
    with pytest.raises(ConfigError):
        split_forget(train, train, "other", 1)


def test_split_invariants_enforced():
    from semu.data import DatasetSplit
    train = _train(10)
    with pytest.raises(InvalidInputError):
        DatasetSplit(train, train, np.array([0, 1]), np.array([1, 2, 3]), "random_fraction", 0.2)


def test_dataset_shape_guard():
    with pytest.raises(InvalidInputError):
        Dataset(np.zeros((3, 2)), [0, 1])
