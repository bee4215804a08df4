"""Class-conditional DDPM on 2-D Gaussian mixtures, with classifier-free guidance
and adapter-only unlearning of one class.

The noise network is an ordinary :class:`semu.nn.Model` whose input is the
concatenation ``[x_t, sinusoidal(t), one_hot(c)]``; class index ``num_classes``
is the null token used for unconditional estimates. Because it is a plain
model, the classifier adapter selection works on it unchanged.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from semu import nn
from semu.data import Dataset
from semu.errors import ConfigError, InvalidInputError, NumericalError
from semu.unlearn import trainable_set

_T_STREAM, _NOISE_STREAM, _DROP_STREAM, _BATCH_STREAM, _CPRIME_STREAM = 11, 12, 13, 14, 15


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ConfigError("beta schedule must be a non-empty vector")
        if not (np.all(b > 0) and np.all(b < 1) and np.all(np.diff(b) >= 0)):
            raise ConfigError("beta schedule must be non-decreasing inside (0, 1)")
        object.__setattr__(self, "beta", b)

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def posterior_variance(self) -> np.ndarray:
        """``beta_t (1 - abar_{t-1}) / (1 - abar_t)``, indexed by ``t - 1``; zero at t = 1."""
        ab = self.alpha_bar
        prev = np.concatenate([[1.0], ab[:-1]])
        return self.beta * (1.0 - prev) / (1.0 - ab)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        sched = cls(np.array(d["beta"], dtype=np.float64))
        if sched.T != int(d["T"]):
            raise ConfigError(f"schedule length {sched.T} disagrees with T={d['T']}")
        return sched


def linear_schedule(T: int = 50, beta_start: float = 2e-3, beta_end: float = 0.4) -> DiffusionSchedule:
    if T < 1:
        raise ConfigError("T must be at least 1")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T))


def forward_diffuse(x0, t, noise, schedule: DiffusionSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`` for 1-based ``t`` (scalar or per row)."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise InvalidInputError(f"timestep must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bar[t - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=np.float64)


def time_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, t[:, None] / 1000.0], axis=1)
    return emb


@dataclass
class CondNoiseModel:
    """``net`` maps ``[x_t, emb(t), one_hot(c)]`` to a 2-D noise estimate."""

    net: object
    num_classes: int
    embed_dim: int = 16

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def input_size(self) -> int:
        return 2 + self.embed_dim + self.num_classes + 1

    def inputs(self, x_t, t, c) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        n = len(x_t)
        t = np.broadcast_to(np.asarray(t), (n,))
        c = np.broadcast_to(np.asarray(c), (n,)).astype(np.int64)
        if np.any(c < 0) or np.any(c > self.num_classes):
            raise InvalidInputError(f"class tokens must lie in [0, {self.num_classes}]")
        onehot = np.zeros((n, self.num_classes + 1))
        onehot[np.arange(n), c] = 1.0
        return np.concatenate([x_t, time_embedding(t, self.embed_dim), onehot], axis=1)

    def eps(self, x_t, t, c) -> np.ndarray:
        return nn.forward(self.net, self.inputs(x_t, t, c))

    def with_net(self, net) -> "CondNoiseModel":
        return CondNoiseModel(net, self.num_classes, self.embed_dim)


def init_noise_model(num_classes: int = 4, embed_dim: int = 16, hidden=(128, 128), seed: int = 0) -> CondNoiseModel:
    size_in = 2 + embed_dim + num_classes + 1
    net = nn.init_model(nn.mlp_specs([size_in, *hidden, 2]), seed)
    net.num_classes = 2
    return CondNoiseModel(net, num_classes, embed_dim)


def _check_w(w: float) -> None:
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"guidance factor must lie in [0, 1], got {w}")


def cfg_noise(model: CondNoiseModel, x_t, t, c, w: float) -> np.ndarray:
    """Guided estimate ``(1 - w) eps(x_t | null) + w eps(x_t | c)``."""
    _check_w(w)
    e_null = model.eps(x_t, t, model.null_class)
    e_cond = model.eps(x_t, t, c)
    return (1.0 - w) * e_null + w * e_cond


def denoising_loss(model: CondNoiseModel, x0, c, t, noise, schedule: DiffusionSchedule):
    """Mean over samples of ``||eps_hat - noise||^2`` and its gradient for every weight."""
    x_t = forward_diffuse(x0, t, noise, schedule)
    out, cache = nn.forward(model.net, model.inputs(x_t, t, c), return_cache=True)
    diff = out - noise
    b = len(diff)
    loss = float(np.sum(diff ** 2) / b)
    return loss, nn.backward(model.net, cache, 2.0 * diff / b)


def _draw_t_noise(rng: np.random.Generator, n: int, T: int):
    return rng.integers(1, T + 1, size=n), rng.standard_normal((n, 2))


def train_ddpm(model: CondNoiseModel, data: Dataset, schedule: DiffusionSchedule, epochs: int,
               lr: float = 0.01, cond_drop_prob: float = 0.1, seed: int = 0, batch_size: int = 128,
               momentum: float = 0.9, held_out: Dataset | None = None) -> list[dict]:
    """Denoising-MSE training in place; labels are replaced by the null token with ``cond_drop_prob``."""
    if not 0.0 <= cond_drop_prob < 1.0:
        raise ConfigError(f"cond_drop_prob must lie in [0, 1), got {cond_drop_prob}")
    if len(data) and data.y.max() >= model.num_classes:
        raise InvalidInputError("dataset labels exceed the model's class count")
    opt = nn.SGD(lr, momentum)
    params = nn.model_params(model.net)
    order_rng = nn.shuffle_rng(seed)
    rng = np.random.default_rng([seed, _NOISE_STREAM])
    log = []
    for epoch in range(epochs):
        total = 0.0
        for idx in nn.batches(len(data), batch_size, order_rng):
            t, noise = _draw_t_noise(rng, len(idx), schedule.T)
            c = np.where(rng.random(len(idx)) < cond_drop_prob, model.null_class, data.y[idx])
            loss, grads = denoising_loss(model, data.x[idx], c, t, noise, schedule)
            opt.step(params, nn.grads_list(grads))
            total += loss * len(idx)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NumericalError(f"diffusion training diverged at epoch {epoch + 1}")
        row = {"epoch": epoch + 1, "loss": total / len(data)}
        if held_out is not None:
            row["held_out_loss"] = held_out_loss(model, held_out, schedule, seed)
        log.append(row)
    return log


def held_out_loss(model: CondNoiseModel, data: Dataset, schedule: DiffusionSchedule, seed: int = 0) -> float:
    """Conditional denoising MSE on fixed seeded (t, noise) draws."""
    rng = np.random.default_rng([seed, _T_STREAM])
    t, noise = _draw_t_noise(rng, len(data), schedule.T)
    x_t = forward_diffuse(data.x, t, noise, schedule)
    return float(np.sum((model.eps(x_t, t, data.y) - noise) ** 2) / len(data))


def sample(model: CondNoiseModel, schedule: DiffusionSchedule, c, w: float, n: int, seed: int = 0) -> np.ndarray:
    """Ancestral sampling from ``z_T ~ N(0, I)`` with the guided noise estimate."""
    _check_w(w)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 2))
    beta, alpha, ab = schedule.beta, schedule.alpha, schedule.alpha_bar
    var = schedule.posterior_variance()
    for t in range(schedule.T, 0, -1):
        eps = cfg_noise(model, z, t, c, w)
        mean = (z - beta[t - 1] / np.sqrt(1.0 - ab[t - 1]) * eps) / np.sqrt(alpha[t - 1])
        z = mean + np.sqrt(var[t - 1]) * rng.standard_normal((n, 2)) if t > 1 else mean
    return z


def generation_loss(model: CondNoiseModel, forget, c_prime, remain, t, noise, schedule: DiffusionSchedule,
                    beta_remain: float = 0.0, both_branches: bool = False):
    """Forgetting loss for the generator and its gradient for every weight.

    ``mean ||eps(x_t | c') - eps(x_t | c)||^2 + beta_remain * denoising MSE(remain)``.
    ``forget`` and ``remain`` are ``(x0, c)`` pairs; ``t`` and ``noise`` are
    ``(t_f, t_r)`` / ``(noise_f, noise_r)`` pairs. The ``c'`` branch is a
    fixed target unless ``both_branches`` is set.
    """
    if beta_remain > 0 and remain is None:
        raise ConfigError("beta_remain > 0 requires a remain batch")
    loss = 0.0
    grads = nn.GradientSet.zeros_like(model.net)
    if forget is not None:
        x0, c = forget
        c_prime = np.asarray(c_prime)
        if np.any(c_prime == np.asarray(c)):
            raise InvalidInputError("every c' must differ from its forget class")
        x_t = forward_diffuse(x0, t[0], noise[0], schedule)
        out_c, cache_c = nn.forward(model.net, model.inputs(x_t, t[0], c), return_cache=True)
        out_p, cache_p = nn.forward(model.net, model.inputs(x_t, t[0], c_prime), return_cache=True)
        diff = out_c - out_p
        b = len(diff)
        loss += float(np.sum(diff ** 2) / b)
        grads = grads + nn.backward(model.net, cache_c, 2.0 * diff / b)
        if both_branches:
            grads = grads + nn.backward(model.net, cache_p, -2.0 * diff / b)
    if remain is not None and beta_remain > 0:
        loss_r, g_r = denoising_loss(model, remain[0], remain[1], t[1], noise[1], schedule)
        loss += beta_remain * loss_r
        grads = grads + g_r.scale(beta_remain)
    return loss, grads


def unlearn_loss_generation(model: CondNoiseModel, forget, c_prime, remain, t, noise,
                            schedule: DiffusionSchedule, beta_remain: float = 0.0,
                            both_branches: bool = False):
    """:func:`generation_loss` with gradients restricted to the trainable set."""
    loss, grads = generation_loss(model, forget, c_prime, remain, t, noise, schedule,
                                  beta_remain, both_branches)
    _, mapper = trainable_set(model.net)
    return loss, mapper(grads)


def random_other_classes(rng: np.random.Generator, c, num_classes: int) -> np.ndarray:
    c = np.asarray(c)
    return (c + rng.integers(1, num_classes, size=c.shape)) % num_classes


def forget_gradient_loss(model: CondNoiseModel, schedule: DiffusionSchedule, seed: int = 0):
    """Loss callback for gradient accumulation: the forget term of :func:`generation_loss`.

    ``t``, noise and ``c'`` come from one seeded stream consumed in batch order.
    """
    rng = np.random.default_rng([seed, _T_STREAM])

    def loss_fn(net, x0, c):
        t, noise = _draw_t_noise(rng, len(x0), schedule.T)
        c_prime = random_other_classes(rng, c, model.num_classes)
        return generation_loss(model.with_net(net), (x0, c), c_prime, None, (t, None), (noise, None), schedule)

    return loss_fn


@dataclass
class GenUnlearnConfig:
    iterations: int = 200
    lr: float = 0.01
    momentum: float = 0.0
    batch_size: int = 128
    beta_remain: float = 1.0
    guidance_w: float = 0.8
    forget_class: int = 0
    mode: str = "with_subset"
    subset_fraction: float = 0.05
    fixed_relabel: bool = False
    both_branches: bool = False
    seed: int = 0

    def validate(self) -> None:
        _check_w(self.guidance_w)
        if self.mode not in ("forget_only", "with_remain", "with_subset"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.iterations < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("iterations must be >= 0, batch_size and lr positive")
        if self.beta_remain < 0:
            raise ConfigError("beta_remain must be non-negative")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError("subset_fraction must lie in (0, 1]")

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.mode == "forget_only" else self.beta_remain


def _union(forget: Dataset, remain: Dataset | None, cfg: GenUnlearnConfig):
    if cfg.mode != "forget_only" and remain is None:
        raise ConfigError(f"mode {cfg.mode} needs the remaining data")
    xs, ys = [forget.x], [forget.y]
    if cfg.mode == "with_remain":
        xs.append(remain.x)
        ys.append(remain.y)
    elif cfg.mode == "with_subset":
        rng = np.random.default_rng([cfg.seed, 2])
        k = min(len(remain), max(1, int(np.floor(cfg.subset_fraction * len(remain)))))
        idx = np.sort(rng.choice(len(remain), size=k, replace=False))
        xs.append(remain.x[idx])
        ys.append(remain.y[idx])
    return np.concatenate(xs), np.concatenate(ys), np.arange(sum(map(len, ys))) < len(forget)


def run_generation_unlearning(model: CondNoiseModel, forget: Dataset, remain: Dataset | None,
                              cfg: GenUnlearnConfig, schedule: DiffusionSchedule,
                              history: list | None = None) -> CondNoiseModel:
    """SGD on the generation loss over batches sampled from the union; returns a new model."""
    cfg.validate()
    if len(forget) == 0:
        raise ConfigError("forget set is empty")
    x, y, is_forget = _union(forget, remain, cfg)
    out = model.with_net(copy.deepcopy(model.net))
    params, mapper = trainable_set(out.net)
    if not params or cfg.iterations == 0:
        return out
    opt = nn.SGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, _BATCH_STREAM])
    c_rng = np.random.default_rng([cfg.seed, _CPRIME_STREAM])
    fixed_prime = random_other_classes(c_rng, y[is_forget], model.num_classes) if cfg.fixed_relabel else None
    beta = cfg.effective_beta
    for it in range(cfg.iterations):
        idx = np.sort(rng.choice(len(y), size=min(cfg.batch_size, len(y)), replace=False))
        fi, ri = idx[is_forget[idx]], idx[~is_forget[idx]]
        t_f, n_f = _draw_t_noise(rng, fi.size, schedule.T)
        t_r, n_r = _draw_t_noise(rng, ri.size, schedule.T)
        fb = (x[fi], y[fi]) if fi.size else None
        rb = (x[ri], y[ri]) if ri.size else None
        if fixed_prime is not None:
            c_prime = fixed_prime[fi]
        else:
            c_prime = random_other_classes(c_rng, y[fi], model.num_classes)
        loss, grads = generation_loss(out, fb, c_prime, rb, (t_f, t_r), (n_f, n_r), schedule,
                                      beta if rb is not None else 0.0, cfg.both_branches)
        opt.step(params, mapper(grads))
        if not np.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise NumericalError(f"generation unlearning diverged at iteration {it + 1}")
        if history is not None:
            history.append({"iteration": it + 1, "loss": loss})
    return out


def gaussian_mixture(num_classes: int = 4, per_class: int = 2000, radius: float = 2.0,
                     sigma: float = 0.15, seed: int = 0) -> Dataset:
    """Isotropic clusters at ``radius`` on the diagonals (corners of a square for 4 classes)."""
    if num_classes < 1 or per_class < 1:
        raise ConfigError("mixture needs at least one class and one point per class")
    angles = math.pi / 4 + 2 * math.pi * np.arange(num_classes) / num_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    rng = np.random.default_rng(seed)
    x = np.concatenate([c + sigma * rng.standard_normal((per_class, 2)) for c in centers])
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(x, y)


def train_oracle(data: Dataset, seed: int = 0, hidden: int = 32, epochs: int = 20) -> nn.Model:
    oracle = nn.init_model(nn.mlp_specs([2, hidden, hidden, int(data.y.max()) + 1]), seed)
    nn.train(oracle, data.x, data.y, epochs, 0.02, 0.9, 64, seed)
    return oracle


def oracle_predict(oracle: nn.Model, points: np.ndarray) -> np.ndarray:
    return np.argmax(nn.forward(oracle, points), axis=1)


@dataclass
class GenerationEval:
    per_class_agreement: dict
    ua: float
    retained_agreement: float
    samples: list

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        return d


def evaluate_generation(model: CondNoiseModel, oracle: nn.Model, schedule: DiffusionSchedule,
                        forget_class: int | None, w: float = 0.8, n: int = 500, seed: int = 0) -> GenerationEval:
    """Oracle agreement per requested class; UA is the share of forget-class samples not labeled as it."""
    agreement, rows = {}, []
    for c in range(model.num_classes):
        pts = sample(model, schedule, c, w, n, seed=seed * 1000 + c)
        pred = oracle_predict(oracle, pts)
        agreement[c] = 100.0 * float(np.mean(pred == c))
        rows.extend((float(p[0]), float(p[1]), c, int(k)) for p, k in zip(pts, pred))
    retained = [a for c, a in agreement.items() if c != forget_class]
    ua = 100.0 - agreement[forget_class] if forget_class is not None else None
    return GenerationEval(agreement, ua, float(np.mean(retained)) if retained else None, rows)


def write_samples_csv(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "requested_class", "predicted_class"])
        for x, y, c, k in rows:
            w.writerow([repr(x), repr(y), c, k])


def save_noise_model(path, model: CondNoiseModel, schedule: DiffusionSchedule, extra: dict | None = None) -> None:
    from semu.core import AdaptedModel, merge_adapters

    net = merge_adapters(model.net) if isinstance(model.net, AdaptedModel) else model.net
    d = nn.model_to_dict(net)
    d["diffusion"] = {"num_classes": model.num_classes, "embed_dim": model.embed_dim}
    d["schedule"] = schedule.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d))


def load_noise_model(path) -> tuple[CondNoiseModel, DiffusionSchedule, dict]:
    d = json.loads(Path(path).read_text())
    if "diffusion" not in d or "schedule" not in d:
        raise ConfigError(f"{path}: not a diffusion checkpoint")
    net = nn.model_from_dict(d)
    meta = d["diffusion"]
    model = CondNoiseModel(net, int(meta["num_classes"]), int(meta["embed_dim"]))
    if net.layers[0].spec.input_size != model.input_size:
        raise ConfigError("checkpoint input width does not match its class count and embedding size")
    extra = {k: v for k, v in d.items() if k not in ("format", "layers", "num_classes", "seed", "diffusion", "schedule")}
    return model, DiffusionSchedule.from_dict(d["schedule"]), extra
