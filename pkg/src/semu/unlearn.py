"""Random-label fine-tuning of the adapter matrices, plus Retrain/FT/GA/RL baselines."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np

from semu import nn
from semu.core import AdaptedModel
from semu.data import Dataset, DatasetSplit
from semu.errors import ConfigError, NumericalError

MODES = ("forget_only", "with_remain", "with_subset")
BASELINES = ("retrain", "ft", "ga", "rl")
_SUBSET_STREAM = 2


@dataclass
class UnlearnConfig:
    epochs: int = 5
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    alpha: float = 1.0
    mode: str = "forget_only"
    subset_fraction: float = 0.05
    seed: int = 0

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.mode == "forget_only" else self.alpha

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError("subset_fraction must lie in (0, 1]")


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32


@dataclass
class RelabeledForgetSet:
    x: np.ndarray
    new_labels: np.ndarray
    original_labels: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.new_labels)


def relabel(forget: Dataset, num_classes: int, seed: int) -> RelabeledForgetSet:
    """Give every forget sample a fixed label drawn uniformly from the other classes."""
    if num_classes < 2:
        raise ConfigError("relabeling needs at least two classes")
    rng = np.random.default_rng(seed)
    shift = rng.integers(1, num_classes, size=len(forget))
    new = (forget.y + shift) % num_classes
    return RelabeledForgetSet(forget.x.copy(), new, forget.y.copy(), seed)


def trainable_set(model) -> tuple[list[np.ndarray], Callable[[nn.GradientSet], list[np.ndarray]]]:
    """Trainable arrays and the map from full weight gradients onto them."""
    if isinstance(model, AdaptedModel):
        return model.trainable(), model.project_grads
    return nn.model_params(model), nn.grads_list


def _lc_terms(model, forget, remain, alpha):
    if alpha > 0 and remain is None:
        raise ConfigError("alpha > 0 requires a remain batch")
    loss_f = loss_r = 0.0
    grads = None
    if forget is not None:
        loss_f, grads = nn.backward_ce(model, *forget)
    if remain is not None and alpha > 0:
        loss_r, g_r = nn.backward_ce(model, *remain)
        g_r = g_r.scale(alpha)
        grads = g_r if grads is None else grads + g_r
    if grads is None:
        grads = nn.GradientSet.zeros_like(model)
    return loss_f, loss_r, grads


def unlearn_loss_classification(model, forget, remain=None, alpha: float = 0.0):
    """``CE(forget, new labels) + alpha * CE(remain, true labels)`` and its gradient.

    ``forget`` and ``remain`` are ``(x, y)`` pairs (``remain`` may be None).
    Gradients are returned for the trainable set only: the ``R`` matrices of
    an :class:`AdaptedModel`, or every weight and bias of a plain model.
    """
    loss_f, loss_r, grads = _lc_terms(model, forget, remain, alpha)
    _, mapper = trainable_set(model)
    return loss_f + alpha * loss_r, mapper(grads)


def _build_union(d_f_prime: RelabeledForgetSet, d_r: Dataset | None, cfg: UnlearnConfig):
    if cfg.mode != "forget_only" and d_r is None:
        raise ConfigError(f"mode {cfg.mode} needs the remaining dataset")
    xs, ys = [d_f_prime.x], [d_f_prime.new_labels]
    if cfg.mode == "with_remain":
        xs.append(d_r.x)
        ys.append(d_r.y)
    elif cfg.mode == "with_subset":
        rng = np.random.default_rng([cfg.seed, _SUBSET_STREAM])
        k = min(len(d_r), max(1, int(np.floor(cfg.subset_fraction * len(d_r)))))
        idx = np.sort(rng.choice(len(d_r), size=k, replace=False)) if len(d_r) else np.zeros(0, int)
        xs.append(d_r.x[idx])
        ys.append(d_r.y[idx])
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    is_forget = np.arange(len(y)) < len(d_f_prime)
    return x, y, is_forget


def _finetune(model, x, y, is_forget, cfg: UnlearnConfig, alpha: float, history=None, monitor=None):
    params, mapper = trainable_set(model)
    if not params:
        return model
    opt = nn.SGD(cfg.lr, cfg.momentum)
    rng = nn.shuffle_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        sum_f = sum_r = 0.0
        n_f = n_r = 0
        for idx in nn.batches(len(y), cfg.batch_size, rng):
            fi, ri = idx[is_forget[idx]], idx[~is_forget[idx]]
            forget = (x[fi], y[fi]) if fi.size else None
            remain = (x[ri], y[ri]) if ri.size else None
            a = alpha if remain is not None else 0.0
            loss_f, loss_r, grads = _lc_terms(model, forget, remain, a)
            opt.step(params, mapper(grads))
            sum_f += loss_f * fi.size
            sum_r += loss_r * ri.size
            n_f += fi.size
            n_r += ri.size
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NumericalError(f"unlearning diverged at epoch {epoch + 1}")
        if history is not None:
            row = {"epoch": epoch + 1,
                   "loss_forget": sum_f / n_f if n_f else 0.0,
                   "loss_remain": sum_r / n_r if n_r else 0.0}
            if monitor is not None:
                row.update(monitor(model))
            history.append(row)
    return model


def run_unlearning(adapted: AdaptedModel, d_f_prime: RelabeledForgetSet, d_r: Dataset | None,
                   cfg: UnlearnConfig, history: list | None = None, monitor=None) -> AdaptedModel:
    """Fine-tune only the ``R`` matrices on ``D_f'`` (joined with remain data per mode).

    Returns a new model; ``adapted`` is left untouched. When ``history`` is a
    list, one row of mean forget/remain losses per epoch is appended (merged
    with ``monitor(model)`` if given).
    """
    cfg.validate()
    x, y, is_forget = _build_union(d_f_prime, d_r, cfg)
    theta_u = copy.deepcopy(adapted)
    return _finetune(theta_u, x, y, is_forget, cfg, cfg.effective_alpha, history, monitor)


def run_baseline(kind: str, original: nn.Model, split: DatasetSplit, cfg: UnlearnConfig,
                 train_cfg: TrainConfig | None = None, init_seed: int | None = None) -> nn.Model:
    """Comparison methods that update every weight.

    retrain: fresh init trained on ``D_r`` with ``train_cfg`` (``init_seed`` drives
    both init and shuffling, so it does not depend on the unlearning seed); ft: continue
    training on ``D_r``; ga: gradient ascent on true-label CE over ``D_f``;
    rl: random-label fine-tuning on ``D_f'`` (joined with ``D_r`` in remain modes).
    """
    if kind not in BASELINES:
        raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    cfg.validate()
    remain, forget = split.remain, split.forget
    if kind == "retrain":
        tc = train_cfg or TrainConfig()
        seed = original.seed if init_seed is None else init_seed
        model = nn.init_model(original.specs, seed)
        nn.train(model, remain.x, remain.y, tc.epochs, tc.lr, tc.momentum, tc.batch_size, seed)
        return model
    model = original.copy()
    if kind == "ft":
        if cfg.epochs:
            nn.train(model, remain.x, remain.y, cfg.epochs, cfg.lr, cfg.momentum, cfg.batch_size, cfg.seed)
        return model
    if kind == "ga":
        params = nn.model_params(model)
        opt = nn.SGD(cfg.lr, cfg.momentum)
        rng = nn.shuffle_rng(cfg.seed)
        for epoch in range(cfg.epochs):
            for idx in nn.batches(len(forget), cfg.batch_size, rng):
                _, g = nn.backward_ce(model, forget.x[idx], forget.y[idx])
                opt.step(params, nn.grads_list(g.scale(-1.0)))
            if not all(np.all(np.isfinite(p)) for p in params):
                raise NumericalError(f"gradient ascent diverged at epoch {epoch + 1}")
        return model
    d_f_prime = relabel(forget, original.num_classes, cfg.seed)
    x, y, is_forget = _build_union(d_f_prime, remain, cfg)
    return _finetune(model, x, y, is_forget, cfg, cfg.effective_alpha)
