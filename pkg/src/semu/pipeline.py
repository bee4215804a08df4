"""End-to-end runs assembled from the library pieces, shared by the CLI and the tests."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from semu import core, diffusion, metrics, nn, unlearn
from semu.config import RunConfig
from semu.data import Dataset, DatasetSplit, load_csv, make_blobs, split_forget
from semu.errors import ConfigError

METRICS_LOG_FIELDS = ("epoch", "loss_forget", "loss_remain", "ua", "ra")


def classification_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "csv":
        train, test = load_csv(d.train_csv, d.label_column), load_csv(d.test_csv, d.label_column)
        if train.x.shape[1] != test.x.shape[1]:
            raise ConfigError("data: train and test CSVs have different feature counts")
        return train, test
    return make_blobs(d.num_classes, d.per_class, d.dim, d.separation, d.sigma, cfg.seeds.data_seed)


def classifier_specs(cfg: RunConfig, input_dim: int, num_classes: int) -> list[nn.LayerSpec]:
    return nn.mlp_specs([input_dim, *cfg.model.hidden, num_classes])


def pretrain(cfg: RunConfig):
    """Train the original classifier. Returns ``(model, per-epoch log, train, test)``."""
    train, test = classification_data(cfg)
    num_classes = max(train.num_classes, test.num_classes)
    model = nn.init_model(classifier_specs(cfg, train.x.shape[1], num_classes), cfg.seeds.model_seed)
    t = cfg.train
    log = nn.train(model, train.x, train.y, t.epochs, t.lr, t.momentum, t.batch_size, cfg.seeds.model_seed)
    return model, log, train, test


def check_compatible(model: nn.Model, cfg: RunConfig, train: Dataset) -> None:
    expected = classifier_specs(cfg, train.x.shape[1], model.num_classes)
    if model.specs != expected or model.num_classes < train.num_classes:
        got = [s.weight_shape for s in model.specs]
        want = [s.weight_shape for s in expected]
        raise ConfigError(f"model: checkpoint layers {got} do not match the configured architecture {want}")


def make_split(cfg: RunConfig, train: Dataset, test: Dataset) -> DatasetSplit:
    f = cfg.require_forgetting()
    return split_forget(train, test, f.kind, f.param, cfg.seeds.data_seed)


def check_remain_access(cfg: RunConfig) -> None:
    if cfg.unlearn.mode != "forget_only" and not cfg.unlearn.remain_access:
        raise ConfigError(f"unlearn.mode: {cfg.unlearn.mode} needs remain access "
                          f"(--remain-access or unlearn.remain_access=true)")


def unlearn_config(cfg: RunConfig) -> unlearn.UnlearnConfig:
    u = cfg.unlearn
    return unlearn.UnlearnConfig(epochs=u.epochs, lr=u.lr, momentum=u.momentum, batch_size=u.batch_size,
                                 alpha=u.alpha, mode=u.mode, subset_fraction=u.subset_fraction,
                                 seed=cfg.seeds.unlearn_seed)


def semu_config(cfg: RunConfig) -> core.SemuConfig:
    s = cfg.semu
    return core.SemuConfig(s.gamma, dict(s.gamma_overrides), s.use_perp_projection, s.grad_reduction,
                           s.r_max, s.batch_size)


def spectra_summary(selections: list[core.LayerSelection]) -> list[dict]:
    out = []
    for s in selections:
        out.append({"layer_index": s.index, "layer_kind": s.kind, "gamma": s.gamma, "r": s.r,
                    "num_sigma": int(s.sigma.size),
                    "sigma_max": float(s.sigma[0]) if s.sigma.size else None,
                    "explained_at_r": float(s.explained[s.r - 1]) if s.r else 0.0})
    return out


@dataclass
class SemuRun:
    grads: nn.GradientSet
    adapted: core.AdaptedModel
    theta_u: core.AdaptedModel
    merged: nn.Model
    report: metrics.UnlearnReport
    spectrum: list[core.LayerSpectrum]
    history: list[dict] = field(default_factory=list)


def _selection_run_meta(cfg: RunConfig, adapted: core.AdaptedModel) -> dict:
    return {"seeds": cfg.seeds.model_dump(),
            "trainable_params": adapted.trainable_params,
            "total_params": adapted.total_params,
            "spectra": spectra_summary(adapted.selections)}


def run_semu(cfg: RunConfig, model: nn.Model, split: DatasetSplit, log_metrics: bool = False,
             retrain_report: metrics.UnlearnReport | None = None) -> SemuRun:
    """Select the adapter subspaces, fine-tune them on the relabeled forget set, evaluate."""
    check_remain_access(cfg)
    start = time.perf_counter()
    scfg = semu_config(cfg)
    forget = split.forget
    grads = core.accumulate_forget_gradients(model, forget.x, forget.y, scfg.batch_size, scfg.grad_reduction)
    adapted = core.build_adapters(model, grads, scfg)
    ucfg = unlearn_config(cfg)
    d_f_prime = unlearn.relabel(forget, model.num_classes, cfg.seeds.unlearn_seed)
    history: list[dict] = []
    monitor = None
    if log_metrics:
        def monitor(m):
            return {"ua": metrics.compute_ua(m, forget), "ra": metrics.accuracy(m, split.remain)}
    remain = split.remain if ucfg.mode != "forget_only" else None
    theta_u = unlearn.run_unlearning(adapted, d_f_prime, remain, ucfg, history if log_metrics else None, monitor)
    merged = core.merge_adapters(theta_u)
    run = {**_selection_run_meta(cfg, adapted), "epochs": ucfg.epochs, "lr": ucfg.lr, "alpha": ucfg.effective_alpha}
    wall = time.perf_counter() - start if cfg.eval.record_wallclock else None
    report = metrics.build_report(theta_u, split, adapted.trainable_params, adapted.total_params, retrain_report,
                                  method="semu", mode=ucfg.mode, gamma=cfg.semu.gamma,
                                  seed=cfg.seeds.unlearn_seed, mia_seed=cfg.eval.mia_seed,
                                  wallclock_s=wall, run=run)
    return SemuRun(grads, adapted, theta_u, merged, report,
                   core.spectrum_report(grads, model, scfg), history)


def run_spectrum(cfg: RunConfig, model: nn.Model, split: DatasetSplit) -> list[core.LayerSpectrum]:
    scfg = semu_config(cfg)
    grads = core.accumulate_forget_gradients(model, split.forget.x, split.forget.y, scfg.batch_size,
                                             scfg.grad_reduction)
    return core.spectrum_report(grads, model, scfg)


def run_baseline(cfg: RunConfig, model: nn.Model, split: DatasetSplit, kind: str,
                 retrain_report: metrics.UnlearnReport | None = None) -> tuple[nn.Model, metrics.UnlearnReport]:
    if kind not in unlearn.BASELINES:
        raise ConfigError(f"kind: unknown baseline {kind!r}; expected one of {unlearn.BASELINES}")
    mode = cfg.unlearn.mode if kind == "rl" else "n/a"
    if kind == "rl":
        check_remain_access(cfg)
    start = time.perf_counter()
    b = cfg.baseline
    ucfg = unlearn.UnlearnConfig(epochs=b.epochs, lr=b.lr, momentum=b.momentum, batch_size=b.batch_size,
                                 alpha=cfg.unlearn.alpha, mode=cfg.unlearn.mode if kind == "rl" else "forget_only",
                                 subset_fraction=cfg.unlearn.subset_fraction, seed=cfg.seeds.unlearn_seed)
    t = cfg.train
    out = unlearn.run_baseline(kind, model, split, ucfg, unlearn.TrainConfig(t.epochs, t.lr, t.momentum, t.batch_size),
                               init_seed=cfg.seeds.model_seed)
    total = out.num_weight_params
    wall = time.perf_counter() - start if cfg.eval.record_wallclock else None
    epochs = t.epochs if kind == "retrain" else b.epochs
    report = metrics.build_report(out, split, total, total, retrain_report, method=kind, mode=mode, gamma=None,
                                  seed=cfg.seeds.unlearn_seed, mia_seed=cfg.eval.mia_seed, wallclock_s=wall,
                                  run={"seeds": cfg.seeds.model_dump(), "epochs": epochs})
    return out, report


def evaluate_model(cfg: RunConfig, model: nn.Model, split: DatasetSplit, method: str = "original",
                   retrain_report: metrics.UnlearnReport | None = None) -> metrics.UnlearnReport:
    """Report for a model evaluated as-is; nothing was trained, so TParams is 0."""
    return metrics.build_report(model, split, 0, model.num_weight_params, retrain_report, method=method,
                                mode="n/a", gamma=None, seed=cfg.seeds.unlearn_seed,
                                mia_seed=cfg.eval.mia_seed, run={"seeds": cfg.seeds.model_dump()})


def write_metrics_log(path, history: list[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_LOG_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row.get(k, float("nan")))) for k in METRICS_LOG_FIELDS[1:]])


# diffusion ---------------------------------------------------------------

def diffusion_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.diffusion
    seed = cfg.seeds.data_seed
    train = diffusion.gaussian_mixture(d.num_classes, d.per_class, d.radius, d.sigma, seed)
    held_out = diffusion.gaussian_mixture(d.num_classes, max(1, d.per_class // 8), d.radius, d.sigma, [seed, 1])
    return train, held_out


def diffusion_schedule(cfg: RunConfig) -> diffusion.DiffusionSchedule:
    d = cfg.diffusion
    return diffusion.linear_schedule(d.T, d.beta_start, d.beta_end)


@dataclass
class DiffusionPretrained:
    model: diffusion.CondNoiseModel
    schedule: diffusion.DiffusionSchedule
    oracle: nn.Model
    log: list[dict]


def diffusion_pretrain(cfg: RunConfig) -> DiffusionPretrained:
    d = cfg.diffusion
    train, held_out = diffusion_data(cfg)
    sched = diffusion_schedule(cfg)
    model = diffusion.init_noise_model(d.num_classes, d.embed_dim, tuple(d.hidden), cfg.seeds.model_seed)
    log = diffusion.train_ddpm(model, train, sched, d.epochs, d.lr, d.cond_drop_prob, cfg.seeds.model_seed,
                               d.batch_size, d.momentum, held_out)
    oracle = diffusion.train_oracle(train, cfg.seeds.model_seed, d.oracle_hidden, d.oracle_epochs)
    return DiffusionPretrained(model, sched, oracle, log)


def save_diffusion_checkpoint(path, pre: DiffusionPretrained, extra: dict | None = None) -> None:
    diffusion.save_noise_model(path, pre.model, pre.schedule,
                               {"oracle": nn.model_to_dict(pre.oracle), **(extra or {})})


def load_diffusion_checkpoint(path) -> DiffusionPretrained:
    model, sched, extra = diffusion.load_noise_model(path)
    if "oracle" not in extra:
        raise ConfigError(f"{path}: diffusion checkpoint has no oracle classifier")
    return DiffusionPretrained(model, sched, nn.model_from_dict(extra["oracle"]), extra.get("train_log", []))


@dataclass
class DiffusionRun:
    adapted: core.AdaptedModel
    theta_u: diffusion.CondNoiseModel
    before: diffusion.GenerationEval
    after: diffusion.GenerationEval
    report: metrics.UnlearnReport
    spectrum: list[core.LayerSpectrum]
    grads: nn.GradientSet


def _diffusion_split(cfg: RunConfig, pre: DiffusionPretrained):
    d = cfg.diffusion
    if pre.model.num_classes != d.num_classes:
        raise ConfigError(f"diffusion.num_classes: checkpoint has {pre.model.num_classes} classes")
    train, _ = diffusion_data(cfg)
    forget = train.subset(np.flatnonzero(train.y == d.forget_class))
    remain = train.subset(np.flatnonzero(train.y != d.forget_class))
    return forget, remain


def _diffusion_grads(cfg: RunConfig, pre: DiffusionPretrained, forget: Dataset) -> nn.GradientSet:
    scfg = semu_config(cfg)
    loss_fn = diffusion.forget_gradient_loss(pre.model, pre.schedule, cfg.seeds.unlearn_seed)
    return core.accumulate_forget_gradients(pre.model.net, forget.x, forget.y, scfg.batch_size,
                                            scfg.grad_reduction, loss_fn=loss_fn)


def diffusion_spectrum(cfg: RunConfig, pre: DiffusionPretrained) -> list[core.LayerSpectrum]:
    forget, _ = _diffusion_split(cfg, pre)
    return core.spectrum_report(_diffusion_grads(cfg, pre, forget), pre.model.net, semu_config(cfg))


def diffusion_unlearn(cfg: RunConfig, pre: DiffusionPretrained) -> DiffusionRun:
    check_remain_access(cfg)
    d = cfg.diffusion
    start = time.perf_counter()
    forget, remain = _diffusion_split(cfg, pre)
    scfg = semu_config(cfg)
    grads = _diffusion_grads(cfg, pre, forget)
    adapted = core.build_adapters(pre.model.net, grads, scfg)
    gcfg = diffusion.GenUnlearnConfig(iterations=d.iterations, lr=d.unlearn_lr, momentum=d.unlearn_momentum,
                                      batch_size=d.unlearn_batch_size, beta_remain=d.beta_remain,
                                      guidance_w=d.guidance_w, forget_class=d.forget_class,
                                      mode=cfg.unlearn.mode, subset_fraction=cfg.unlearn.subset_fraction,
                                      fixed_relabel=d.fixed_relabel, both_branches=d.both_branches,
                                      seed=cfg.seeds.unlearn_seed)
    theta_u = diffusion.run_generation_unlearning(pre.model.with_net(adapted), forget, remain, gcfg, pre.schedule)
    eval_seed = cfg.eval.mia_seed
    before = diffusion.evaluate_generation(pre.model, pre.oracle, pre.schedule, d.forget_class, d.guidance_w,
                                           d.eval_samples, eval_seed)
    after = diffusion.evaluate_generation(theta_u, pre.oracle, pre.schedule, d.forget_class, d.guidance_w,
                                          d.eval_samples, eval_seed)
    run = {**_selection_run_meta(cfg, adapted), "iterations": d.iterations, "lr": d.unlearn_lr,
           "beta_remain": gcfg.effective_beta, "forget_class": d.forget_class,
           "agreement_before": {str(k): v for k, v in before.per_class_agreement.items()},
           "agreement_after": {str(k): v for k, v in after.per_class_agreement.items()}}
    wall = time.perf_counter() - start if cfg.eval.record_wallclock else None
    report = metrics.UnlearnReport(method="semu", mode=gcfg.mode, gamma=cfg.semu.gamma,
                                   seed=cfg.seeds.unlearn_seed, ua=after.ua, ra=after.retained_agreement,
                                   ta=None, mia=None, tparams_pct=adapted.tparams_pct, wallclock_s=wall, run=run)
    return DiffusionRun(adapted, theta_u, before, after, report,
                        core.spectrum_report(grads, pre.model.net, scfg), grads)
