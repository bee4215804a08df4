"""Run configuration: JSON files with dotted ``--set`` overrides, strictly validated."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from semu.errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Seeds(_Section):
    model_seed: int = 0
    data_seed: int = 0
    unlearn_seed: int = 0


class DataSection(_Section):
    source: Literal["blobs", "csv"] = "blobs"
    num_classes: int = Field(8, ge=2)
    per_class: int = Field(250, ge=1)
    dim: int = Field(2, ge=1)
    separation: float = Field(6.0, gt=0)
    sigma: float = Field(0.5, ge=0)
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None
    label_column: str = "label"

    @model_validator(mode="after")
    def _csv_paths(self):
        if self.source == "csv" and (self.train_csv is None or self.test_csv is None):
            raise ValueError("source 'csv' needs both train_csv and test_csv")
        return self


class ModelSection(_Section):
    hidden: list[int] = Field(default_factory=lambda: [64, 64])


class TrainSection(_Section):
    epochs: int = Field(40, ge=0)
    lr: float = Field(0.02, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(32, ge=1)


class ForgettingSection(_Section):
    kind: Literal["random_fraction", "class_wise"]
    fraction: Optional[float] = None
    target_class: Optional[int] = None

    @model_validator(mode="after")
    def _param(self):
        if self.kind == "random_fraction" and self.fraction is None:
            raise ValueError("random_fraction forgetting needs 'fraction'")
        if self.kind == "class_wise" and self.target_class is None:
            raise ValueError("class_wise forgetting needs 'target_class'")
        return self

    @property
    def param(self) -> float:
        return self.fraction if self.kind == "random_fraction" else self.target_class


class SemuSection(_Section):
    gamma: float = Field(0.9, ge=0, le=1)
    gamma_overrides: dict[int, float] = Field(default_factory=dict)
    use_perp_projection: bool = True
    grad_reduction: Literal["sum", "mean"] = "sum"
    r_max: Optional[int] = Field(None, ge=0)
    batch_size: int = Field(64, ge=1)


class UnlearnSection(_Section):
    mode: Literal["forget_only", "with_remain", "with_subset"] = "forget_only"
    remain_access: bool = False
    epochs: int = Field(10, ge=0)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.0, ge=0, lt=1)
    batch_size: int = Field(32, ge=1)
    alpha: float = Field(1.0, ge=0)
    subset_fraction: float = Field(0.05, gt=0, le=1)


class BaselineSection(_Section):
    """Optimizer settings for the FT, GA and RL baselines (retrain uses ``train``)."""

    epochs: int = Field(5, ge=0)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(32, ge=1)


class EvalSection(_Section):
    mia_seed: int = 0
    record_wallclock: bool = False


class DiffusionSection(_Section):
    num_classes: int = Field(4, ge=2)
    per_class: int = Field(2000, ge=1)
    radius: float = Field(2.0, gt=0)
    sigma: float = Field(0.15, ge=0)
    T: int = Field(50, ge=1)
    beta_start: float = Field(2e-3, gt=0, lt=1)
    beta_end: float = Field(0.4, gt=0, lt=1)
    embed_dim: int = Field(16, ge=1)
    hidden: list[int] = Field(default_factory=lambda: [128, 128])
    epochs: int = Field(50, ge=0)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(128, ge=1)
    cond_drop_prob: float = Field(0.1, ge=0, lt=1)
    oracle_hidden: int = Field(32, ge=1)
    oracle_epochs: int = Field(20, ge=0)
    forget_class: int = Field(0, ge=0)
    iterations: int = Field(1000, ge=0)
    unlearn_lr: float = Field(0.01, gt=0)
    unlearn_momentum: float = Field(0.0, ge=0, lt=1)
    unlearn_batch_size: int = Field(128, ge=1)
    beta_remain: float = Field(2.0, ge=0)
    guidance_w: float = Field(0.8, ge=0, le=1)
    fixed_relabel: bool = False
    both_branches: bool = False
    eval_samples: int = Field(500, ge=1)

    @model_validator(mode="after")
    def _classes(self):
        if self.forget_class >= self.num_classes:
            raise ValueError(f"forget_class {self.forget_class} is not below num_classes {self.num_classes}")
        if self.beta_end < self.beta_start:
            raise ValueError("beta_end must not be below beta_start")
        return self


class RunConfig(_Section):
    task: Literal["classification", "diffusion"]
    seeds: Seeds = Field(default_factory=Seeds)
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    forgetting: Optional[ForgettingSection] = None
    semu: SemuSection = Field(default_factory=SemuSection)
    unlearn: UnlearnSection = Field(default_factory=UnlearnSection)
    baseline: BaselineSection = Field(default_factory=BaselineSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    diffusion: DiffusionSection = Field(default_factory=DiffusionSection)
    output_dir: str = "runs"

    def require_forgetting(self) -> ForgettingSection:
        if self.forgetting is None:
            raise ConfigError("forgetting: field required for this command")
        return self.forgetting


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.path=value`` assignments; values are parsed as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"{key}: {p} is not a section")
            node = nxt
        node[parts[-1]] = parse_value(value)
    return raw


def build_config(raw: dict, overrides: list[str] | None = None) -> RunConfig:
    raw = apply_overrides(json.loads(json.dumps(raw)), overrides or [])
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return build_config(raw, overrides)


def bundled_config(name: str) -> dict:
    """Raw dict of one of the pinned configs shipped in ``semu/configs``."""
    ref = resources.files("semu").joinpath("configs", f"{name}.json")
    if not ref.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return json.loads(ref.read_text(encoding="utf-8"))


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("semu").joinpath("configs", f"{name}.json")))
