"""Synthetic datasets, CSV ingestion and forget/remain splits."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from semu.errors import ConfigError, InvalidInputError

logger = logging.getLogger(__name__)


class ParseError(InvalidInputError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    label_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise InvalidInputError(f"features {self.x.shape} and labels {self.y.shape} disagree")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0


def make_blobs(num_classes: int = 8, per_class: int = 200, dim: int = 2, separation: float = 6.0,
               sigma: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian clusters with an 80/20 stratified train/test split.

    Centers are drawn uniformly from a box and rejected until every pair is at
    least ``separation * sigma`` apart.
    """
    if min(num_classes, per_class, dim) <= 0 or separation <= 0 or sigma < 0:
        raise ConfigError("make_blobs parameters must be positive")
    rng = np.random.default_rng(seed)
    min_dist = separation * max(sigma, 1e-12)
    half_width = min_dist * np.ceil(num_classes ** (1.0 / dim))
    centers: list[np.ndarray] = []
    for k in range(num_classes):
        for _ in range(1000):
            c = rng.uniform(-half_width, half_width, size=dim)
            if all(np.linalg.norm(c - o) >= min_dist for o in centers):
                centers.append(c)
                break
        else:
            raise ConfigError(
                f"could not place center {k} at distance {min_dist:g} from the others "
                f"in dimension {dim} after 1000 attempts"
            )
    n_train = int(np.floor(0.8 * per_class))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for k, c in enumerate(centers):
        pts = c + sigma * rng.standard_normal((per_class, dim))
        tr_x.append(pts[:n_train])
        te_x.append(pts[n_train:])
        tr_y.append(np.full(n_train, k))
        te_y.append(np.full(per_class - n_train, k))
    return (Dataset(np.concatenate(tr_x), np.concatenate(tr_y)),
            Dataset(np.concatenate(te_x), np.concatenate(te_y)))


def load_csv(path, label_column: str = "label") -> Dataset:
    """Read a header-first CSV; labels are remapped to contiguous ``0..C-1``.

    The original-to-contiguous mapping is stored in ``Dataset.label_map``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header expected") from None
        if label_column not in header:
            raise ParseError(f"{path}:1: missing label column {label_column!r}")
        li = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            labels.append(values.pop(li))
            feats.append(values)
    raw = np.array(labels)
    if np.any(raw != np.round(raw)):
        raise ParseError(f"{path}: labels must be integers")
    originals = sorted({int(v) for v in raw})
    mapping = {orig: i for i, orig in enumerate(originals)}
    if originals != list(range(len(originals))):
        logger.info("remapped labels %s", mapping)
    y = np.array([mapping[int(v)] for v in raw], dtype=np.int64)
    x = np.array(feats, dtype=np.float64).reshape(len(y), len(header) - 1)
    return Dataset(x, y, label_map=mapping)


def write_csv(path, data: Dataset, label_column: str = "label") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(data.x.shape[1])] + [label_column])
        for xi, yi in zip(data.x, data.y):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])


@dataclass
class DatasetSplit:
    train: Dataset
    test: Dataset
    forget_idx: np.ndarray
    remain_idx: np.ndarray
    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        f, r = set(self.forget_idx.tolist()), set(self.remain_idx.tolist())
        if f & r or len(f) + len(r) != len(self.train) or f | r != set(range(len(self.train))):
            raise InvalidInputError("forget and remain indices must partition the training set")
        if self.kind == "class_wise":
            target = np.flatnonzero(self.train.y == int(self.param))
            if not np.array_equal(np.sort(self.forget_idx), target):
                raise InvalidInputError("class-wise forget set must be exactly the target class")

    @property
    def forget(self) -> Dataset:
        return self.train.subset(self.forget_idx)

    @property
    def remain(self) -> Dataset:
        return self.train.subset(self.remain_idx)


def split_forget(train: Dataset, test: Dataset, kind: str, param: float, seed: int = 0) -> DatasetSplit:
    """Pick the forget set: a seeded random fraction of ``train`` or one whole class."""
    n = len(train)
    if kind == "random_fraction":
        if not 0.0 < param < 1.0:
            raise ConfigError(f"forget fraction must lie in (0, 1), got {param}")
        k = int(np.floor(param * n))
        rng = np.random.default_rng(seed)
        forget = np.sort(rng.choice(n, size=k, replace=False))
    elif kind == "class_wise":
        cls = int(param)
        if cls != param or not np.any(train.y == cls):
            raise ConfigError(f"class {param} is absent from the training set")
        forget = np.flatnonzero(train.y == cls)
    else:
        raise ConfigError(f"unknown forgetting kind {kind!r}")
    remain = np.setdiff1d(np.arange(n), forget)
    return DatasetSplit(train, test, forget, remain, kind, param, seed)
