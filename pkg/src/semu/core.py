"""Gradient-subspace selection and zero-initialized low-rank adapters.

For each layer the accumulated gradient of the negated forgetting loss is
(optionally) projected perpendicular to the layer weight, decomposed by SVD,
and truncated to the smallest rank whose explained variance reaches gamma.
The layer then computes with ``A + U_r R V_r^T`` where only the ``r x r``
matrix ``R`` is trainable and starts at zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from semu import linalg
from semu.errors import ConfigError
from semu.nn import GradientSet, Layer, LayerSpec, Model, backward_ce, batches

LossFn = Callable[[object, np.ndarray, np.ndarray], tuple[float, GradientSet]]


@dataclass
class SemuConfig:
    gamma_default: float = 0.9
    gamma_overrides: dict[int, float] = field(default_factory=dict)
    use_perp_projection: bool = True
    grad_reduction: str = "sum"
    r_max: int | None = None
    batch_size: int = 64

    def gamma_for(self, layer_index: int) -> float:
        return self.gamma_overrides.get(layer_index, self.gamma_default)

    def validate(self, num_layers: int) -> None:
        for g in [self.gamma_default, *self.gamma_overrides.values()]:
            if not 0.0 <= g <= 1.0:
                raise ConfigError(f"gamma must lie in [0, 1], got {g}")
        bad = [i for i in self.gamma_overrides if not 0 <= i < num_layers]
        if bad:
            raise ConfigError(f"gamma override for nonexistent layer(s) {bad}; model has {num_layers}")
        if self.grad_reduction not in ("sum", "mean"):
            raise ConfigError(f"grad_reduction must be 'sum' or 'mean', got {self.grad_reduction!r}")
        if self.r_max is not None and self.r_max < 0:
            raise ConfigError("r_max must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")


@dataclass
class AdapterLayer:
    """Frozen ``base_weight``, ``u``, ``v`` and bias; trainable ``r_mat``."""

    spec: LayerSpec
    base_weight: np.ndarray
    u: np.ndarray
    v: np.ndarray
    r_mat: np.ndarray
    bias: np.ndarray

    @property
    def weight(self) -> np.ndarray:
        return self.base_weight + self.u @ self.r_mat @ self.v.T

    @property
    def rank(self) -> int:
        return self.r_mat.shape[0]


@dataclass
class LayerSelection:
    index: int
    kind: str
    gamma: float
    sigma: np.ndarray
    explained: np.ndarray
    r: int
    projected_grad: np.ndarray | None = None


@dataclass
class AdaptedModel:
    layers: list
    num_classes: int
    selections: list[LayerSelection]
    seed: int = 0

    @property
    def adapters(self) -> list[AdapterLayer]:
        return [l for l in self.layers if isinstance(l, AdapterLayer)]

    @property
    def trainable_params(self) -> int:
        return sum(a.r_mat.size for a in self.adapters)

    @property
    def total_params(self) -> int:
        return sum(l.spec.weight_shape[0] * l.spec.weight_shape[1] for l in self.layers)

    @property
    def tparams_pct(self) -> float:
        return 100.0 * self.trainable_params / self.total_params

    def trainable(self) -> list[np.ndarray]:
        return [a.r_mat for a in self.adapters]

    def project_grads(self, grads: GradientSet) -> list[np.ndarray]:
        """Chain rule from effective-weight gradients to the ``R`` matrices: ``U^T dW V``."""
        return [l.u.T @ gw @ l.v for l, gw in zip(self.layers, grads.weights)
                if isinstance(l, AdapterLayer)]


def accumulate_forget_gradients(model, x, y, batch_size: int = 64, reduction: str = "sum",
                                loss_fn: LossFn | None = None) -> GradientSet:
    """Gradient of the negated forgetting loss, accumulated over batches in dataset order.

    ``loss_fn(model, xb, yb)`` returns the (positive) forgetting loss and its
    gradient; the default is mean cross-entropy against ``y``.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ConfigError("forget set is empty")
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    loss_fn = loss_fn or backward_ce
    y = np.asarray(y)
    total = GradientSet.zeros_like(model)
    count = 0
    for idx in batches(len(x), batch_size):
        _, g = loss_fn(model, x[idx], y[idx])
        total = total + g.scale(-1.0)
        count += 1
    return total.scale(1.0 / count) if reduction == "mean" else total


def _select_layers(model, grads: GradientSet, cfg: SemuConfig) -> list[tuple[LayerSelection, linalg.SvdFactors | None]]:
    cfg.validate(len(model.layers))
    out = []
    for i, (layer, g) in enumerate(zip(model.layers, grads.weights)):
        if g.shape != layer.weight.shape:
            raise ConfigError(f"gradient shape {g.shape} does not mirror layer {i} weight {layer.weight.shape}")
        gamma = cfg.gamma_for(i)
        g_eff = linalg.perp_project(g, layer.weight) if cfg.use_perp_projection else g.copy()
        if not np.any(g_eff):
            out.append((LayerSelection(i, layer.spec.kind, gamma, np.zeros(0), np.zeros(0), 0, g_eff), None))
            continue
        factors = linalg.svd(g_eff)
        sel = linalg.select_rank(factors.sigma, gamma)
        r = sel.r if cfg.r_max is None else min(sel.r, cfg.r_max)
        out.append((LayerSelection(i, layer.spec.kind, gamma, factors.sigma,
                                   linalg.explained_variance(factors.sigma), r, g_eff), factors))
    return out


def build_adapters(model: Model, grads: GradientSet, cfg: SemuConfig) -> AdaptedModel:
    """Wrap every layer with a nonzero selected rank in a zero-initialized adapter."""
    layers = []
    selections = []
    for (sel, factors), layer in zip(_select_layers(model, grads, cfg), model.layers):
        selections.append(sel)
        if sel.r == 0:
            layers.append(Layer(layer.spec, layer.weight.copy(), layer.bias.copy()))
            continue
        u, _, v = linalg.truncate(factors, sel.r)
        layers.append(AdapterLayer(layer.spec, layer.weight.copy(), u, v,
                                   np.zeros((sel.r, sel.r)), layer.bias.copy()))
    return AdaptedModel(layers, model.num_classes, selections, getattr(model, "seed", 0))


def merge_adapters(adapted: AdaptedModel) -> Model:
    layers = [Layer(l.spec, l.weight.copy(), l.bias.copy()) for l in adapted.layers]
    return Model(layers, adapted.num_classes, adapted.seed)


@dataclass
class LayerSpectrum:
    layer_index: int
    layer_kind: str
    sigma: list[float]
    explained: list[float]
    chosen_r: int


def spectrum_report(grads: GradientSet, model, cfg: SemuConfig) -> list[LayerSpectrum]:
    return [LayerSpectrum(s.index, s.kind, s.sigma.tolist(), s.explained.tolist(), s.r)
            for s, _ in _select_layers(model, grads, cfg)]


def spectrum_csv(rows: list[LayerSpectrum]) -> str:
    """CSV with one row per singular value; a zero-gradient layer gets one row with empty sigma fields."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_index", "layer_kind", "sigma_index", "sigma", "explained_cum", "chosen_r"])
    for row in rows:
        if not row.sigma:
            w.writerow([row.layer_index, row.layer_kind, "", "", "", row.chosen_r])
        for k, (s, e) in enumerate(zip(row.sigma, row.explained), start=1):
            w.writerow([row.layer_index, row.layer_kind, k, repr(s), repr(e), row.chosen_r])
    return buf.getvalue()


def format_tparams(pct: float) -> str:
    return f"{pct:.2f}%"
