"""UA / RA / TA / MIA and the trainable-parameter share, plus report (de)serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression

from semu import nn
from semu.data import Dataset, DatasetSplit
from semu.errors import ConfigError, InvalidInputError, NumericalError

METRIC_KEYS = ("ua", "ra", "ta", "mia", "tparams_pct")
REPORT_KEYS = ("method", "mode", "gamma", "seed", "metrics", "deltas_vs_retrain", "wallclock_s")


def _nonempty(data: Dataset, name: str) -> Dataset:
    if data is None or len(data) == 0:
        raise InvalidInputError(f"{name} is empty")
    return data


def accuracy(model, data: Dataset) -> float:
    """Percent correct under argmax of the logits (ties go to the lowest class index)."""
    _nonempty(data, "dataset")
    pred = np.argmax(nn.forward(model, data.x), axis=1)
    return 100.0 * float(np.mean(pred == data.y))


def compute_ua(model, d_f: Dataset) -> float:
    return 100.0 - accuracy(model, _nonempty(d_f, "forget set"))


class LossThresholdAttacker:
    """Logistic regression on the log of the per-sample true-class loss.

    Trained on a balanced, seeded subsample: members (label 1) drawn from the
    remaining set, non-members (label 0) from the test set.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.clf = LogisticRegression()

    @staticmethod
    def features(model, data: Dataset) -> np.ndarray:
        loss = nn.per_sample_ce(model, data.x, data.y)
        return np.log(np.maximum(loss, 1e-300))[:, None]

    def fit(self, model, members: Dataset, non_members: Dataset) -> "LossThresholdAttacker":
        rng = np.random.default_rng(self.seed)
        n = min(len(members), len(non_members))
        mi = np.sort(rng.choice(len(members), n, replace=False))
        ni = np.sort(rng.choice(len(non_members), n, replace=False))
        feats = np.concatenate([self.features(model, members.subset(mi)),
                                self.features(model, non_members.subset(ni))])
        labels = np.concatenate([np.ones(n, int), np.zeros(n, int)])
        self.clf.fit(feats, labels)
        return self

    def predict_member(self, model, data: Dataset) -> np.ndarray:
        return self.clf.predict(self.features(model, data)).astype(bool)


def compute_mia(model, d_r: Dataset, d_f: Dataset, d_test: Dataset, seed: int = 0) -> float:
    """Percent of the forget set the attacker judges to be non-members."""
    for data, name in ((d_r, "remain set"), (d_f, "forget set"), (d_test, "test set")):
        _nonempty(data, name)
    attacker = LossThresholdAttacker(seed).fit(model, d_r, d_test)
    return 100.0 * float(np.mean(~attacker.predict_member(model, d_f)))


@dataclass
class UnlearnReport:
    method: str
    mode: str
    gamma: float | None
    seed: int
    ua: float | None
    ra: float | None
    ta: float | None
    mia: float | None
    tparams_pct: float
    deltas_vs_retrain: dict | None = None
    wallclock_s: float | None = None
    run: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in METRIC_KEYS:
            v = getattr(self, k)
            if v is not None and not 0.0 <= v <= 100.0:
                raise NumericalError(f"metric {k}={v} outside [0, 100]")

    @property
    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def with_deltas(self, retrain: "UnlearnReport") -> "UnlearnReport":
        deltas = {k: (None if getattr(self, k) is None or getattr(retrain, k) is None
                      else getattr(self, k) - getattr(retrain, k)) for k in METRIC_KEYS}
        return UnlearnReport(**{**self.__dict__, "deltas_vs_retrain": deltas})

    def to_dict(self) -> dict:
        d = {"method": self.method, "mode": self.mode, "gamma": self.gamma, "seed": self.seed,
             "metrics": self.metrics, "deltas_vs_retrain": self.deltas_vs_retrain,
             "wallclock_s": self.wallclock_s}
        if self.run:
            d["run"] = self.run
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnReport":
        missing = [k for k in REPORT_KEYS if k not in d]
        if missing:
            raise ConfigError(f"report is missing keys {missing}")
        metrics = d["metrics"]
        if not isinstance(metrics, dict) or set(metrics) != set(METRIC_KEYS):
            raise ConfigError(f"report metrics must have exactly the keys {list(METRIC_KEYS)}")
        return cls(method=d["method"], mode=d["mode"], gamma=d["gamma"], seed=d["seed"],
                   deltas_vs_retrain=d["deltas_vs_retrain"], wallclock_s=d["wallclock_s"],
                   run=d.get("run", {}), **metrics)

    @classmethod
    def load(cls, path) -> "UnlearnReport":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not a JSON report ({exc})") from None
        return cls.from_dict(d)


def build_report(model, split: DatasetSplit, trainable: int, total: int,
                 retrain_report: UnlearnReport | None = None, *, method: str = "semu",
                 mode: str = "forget_only", gamma: float | None = None, seed: int = 0,
                 mia_seed: int = 0, wallclock_s: float | None = None,
                 run: dict | None = None) -> UnlearnReport:
    if not 0 <= trainable <= total or total <= 0:
        raise InvalidInputError(f"inconsistent parameter counts {trainable}/{total}")
    forget, remain = split.forget, split.remain
    report = UnlearnReport(
        method=method, mode=mode, gamma=gamma, seed=seed,
        ua=compute_ua(model, forget),
        ra=accuracy(model, remain),
        ta=accuracy(model, split.test),
        mia=compute_mia(model, remain, forget, split.test, mia_seed),
        tparams_pct=100.0 * trainable / total,
        wallclock_s=wallclock_s, run=run or {},
    )
    return report.with_deltas(retrain_report) if retrain_report is not None else report


def _cell(value, delta) -> str:
    if value is None:
        return "n/a"
    return f"{value:.2f}" if delta is None else f"{value:.2f} ({abs(delta):.2f})"


def compare_table(reports: list[UnlearnReport], anchor: UnlearnReport | None = None) -> tuple[str, list[dict]]:
    """Text table with parenthesized absolute gaps to the anchor, and the same rows as dicts."""
    header = ["Method", "UA", "RA", "TA", "MIA", "TParams"]
    rows, records = [], []
    for rep in reports:
        deltas = {}
        for k in METRIC_KEYS:
            v = getattr(rep, k)
            a = getattr(anchor, k) if anchor is not None else None
            deltas[k] = None if v is None or a is None else v - a
        cells = [rep.method if rep.mode in ("", "n/a") else f"{rep.method}[{rep.mode}]"]
        cells += [_cell(getattr(rep, k), deltas[k]) for k in ("ua", "ra", "ta", "mia")]
        cells.append(f"{rep.tparams_pct:.2f}%")
        rows.append(cells)
        records.append({"method": rep.method, "mode": rep.mode, "metrics": rep.metrics,
                        "deltas": deltas if anchor is not None else None})
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    return "\n".join(lines) + "\n", records
