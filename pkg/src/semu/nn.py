"""A small feed-forward network engine with exact backpropagation.

Layers are dense or 2-D convolutions. A convolution keeps its kernel as an
``out_channels x (in_channels * kh * kw)`` matrix and runs as a matrix product
over im2col patches, so every layer is literally ``z = W @ x + b``. Inputs and
outputs are flat ``(batch, features)`` arrays; conv feature maps are flattened
channel-major ``(C, H, W)``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from semu.errors import ConfigError, InvalidInputError, NumericalError

CKPT_FORMAT = "semu-ckpt-v1"
_SHUFFLE_STREAM = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    activation: str = "relu"
    in_dim: int = 0
    out_dim: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    padding: int = 0
    input_h: int = 0
    input_w: int = 0

    @classmethod
    def dense(cls, in_dim: int, out_dim: int, activation: str = "relu") -> "LayerSpec":
        return cls(kind="dense", in_dim=in_dim, out_dim=out_dim, activation=activation)

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel, input_hw, stride=1, padding=0,
               activation="relu") -> "LayerSpec":
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        h, w = input_hw
        return cls(kind="conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel_h=kh, kernel_w=kw, stride=stride, padding=padding,
                   input_h=h, input_w=w, activation=activation)

    @property
    def out_hw(self) -> tuple[int, int]:
        oh = (self.input_h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (self.input_w + 2 * self.padding - self.kernel_w) // self.stride + 1
        return oh, ow

    @property
    def input_size(self) -> int:
        if self.kind == "dense":
            return self.in_dim
        return self.in_channels * self.input_h * self.input_w

    @property
    def output_size(self) -> int:
        if self.kind == "dense":
            return self.out_dim
        oh, ow = self.out_hw
        return self.out_channels * oh * ow

    @property
    def weight_shape(self) -> tuple[int, int]:
        if self.kind == "dense":
            return self.out_dim, self.in_dim
        return self.out_channels, self.in_channels * self.kernel_h * self.kernel_w

    def validate(self) -> None:
        if self.kind not in ("dense", "conv2d"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "none"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.kind == "dense":
            dims = {"in_dim": self.in_dim, "out_dim": self.out_dim}
        else:
            dims = {
                "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_h": self.kernel_h, "kernel_w": self.kernel_w,
                "stride": self.stride, "input_h": self.input_h, "input_w": self.input_w,
            }
            if self.padding < 0:
                raise ConfigError("conv2d padding must be non-negative")
        bad = [k for k, v in dims.items() if v <= 0]
        if bad:
            raise ConfigError(f"{self.kind} layer has non-positive {', '.join(bad)}")
        if self.kind == "conv2d" and min(self.out_hw) < 1:
            raise ConfigError(f"conv2d output would be empty: {self.out_hw}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.kind == "dense":
            keep = ("kind", "activation", "in_dim", "out_dim")
        else:
            keep = tuple(k for k in d if k not in ("in_dim", "out_dim"))
        return {k: d[k] for k in keep}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad layer spec {d!r}: {exc}") from None


@dataclass
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class Model:
    layers: list[Layer]
    num_classes: int
    seed: int = 0

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def input_size(self) -> int:
        return self.layers[0].spec.input_size

    @property
    def num_weight_params(self) -> int:
        return sum(layer.weight.size for layer in self.layers)

    def copy(self) -> "Model":
        return copy.deepcopy(self)


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model) -> "GradientSet":
        return cls([np.zeros_like(l.weight) for l in model.layers],
                   [np.zeros_like(l.bias) for l in model.layers])

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet([a + b for a, b in zip(self.weights, other.weights)],
                           [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, c: float) -> "GradientSet":
        return GradientSet([c * w for w in self.weights], [c * b for b in self.biases])


def check_spec(specs: list[LayerSpec]) -> None:
    if not specs:
        raise ConfigError("model needs at least one layer")
    for spec in specs:
        spec.validate()
    for i, (a, b) in enumerate(zip(specs, specs[1:])):
        if a.output_size != b.input_size:
            raise ConfigError(
                f"layers {i} and {i + 1} do not conform: "
                f"output size {a.output_size} vs input size {b.input_size}"
            )


def init_model(specs: list[LayerSpec], seed: int) -> Model:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    check_spec(specs)
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        rows, fan_in = spec.weight_shape
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(rows, fan_in))
        layers.append(Layer(spec=spec, weight=w, bias=np.zeros(rows)))
    return Model(layers=layers, num_classes=specs[-1].output_size, seed=seed)


def mlp_specs(sizes: list[int]) -> list[LayerSpec]:
    """Dense ReLU stack ``sizes[0] -> ... -> sizes[-1]`` with a linear output."""
    n = len(sizes) - 1
    return [LayerSpec.dense(sizes[i], sizes[i + 1], "relu" if i < n - 1 else "none")
            for i in range(n)]


def _im2col(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    b = x.shape[0]
    x = x.reshape(b, spec.in_channels, spec.input_h, spec.input_w)
    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(x, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    oh, ow = spec.out_hw
    win = win[:, :, ::spec.stride, ::spec.stride][:, :, :oh, :ow]
    # (B, C, oh, ow, kh, kw) -> rows are output positions, columns match the weight layout
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, -1)


def _col2im(dcols: np.ndarray, spec: LayerSpec, b: int) -> np.ndarray:
    oh, ow = spec.out_hw
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    d = dcols.reshape(b, oh, ow, spec.in_channels, kh, kw)
    dx = np.zeros((b, spec.in_channels, spec.input_h + 2 * p, spec.input_w + 2 * p))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return dx.reshape(b, -1)


def _layer_forward(spec, weight, bias, a):
    if spec.kind == "dense":
        return a @ weight.T + bias, None
    b = a.shape[0]
    cols = _im2col(a, spec)
    oh, ow = spec.out_hw
    z = (cols @ weight.T + bias).reshape(b, oh, ow, -1).transpose(0, 3, 1, 2).reshape(b, -1)
    return z, cols


def forward(model, x, return_cache: bool = False):
    """Logits for a batch. ``model`` is anything with ``.layers`` of spec/weight/bias."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != model.layers[0].spec.input_size:
        raise InvalidInputError(
            f"input of shape {a.shape} does not match first layer input size "
            f"{model.layers[0].spec.input_size}"
        )
    cache = []
    for layer in model.layers:
        spec = layer.spec
        z, cols = _layer_forward(spec, layer.weight, layer.bias, a)
        cache.append((a, cols, z))
        a = np.maximum(z, 0.0) if spec.activation == "relu" else z
    return (a, cache) if return_cache else a


def backward(model, cache, grad_out: np.ndarray) -> GradientSet:
    """Backpropagate ``d loss / d output`` through a cached forward pass."""
    n = len(model.layers)
    gw: list = [None] * n
    gb: list = [None] * n
    delta = grad_out
    for i in range(n - 1, -1, -1):
        layer = model.layers[i]
        spec = layer.spec
        a_in, cols, z = cache[i]
        if spec.activation == "relu":
            delta = delta * (z > 0)
        w = layer.weight
        if spec.kind == "dense":
            gw[i] = delta.T @ a_in
            gb[i] = delta.sum(axis=0)
            if i:
                delta = delta @ w
        else:
            b = a_in.shape[0]
            oh, ow = spec.out_hw
            d = delta.reshape(b, spec.out_channels, oh, ow).transpose(0, 2, 3, 1).reshape(b * oh * ow, -1)
            gw[i] = d.T @ cols
            gb[i] = d.sum(axis=0)
            if i:
                delta = _col2im(d @ w, spec, b)
    return GradientSet(gw, gb)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InvalidInputError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def per_sample_ce(model, x, y) -> np.ndarray:
    """Cross-entropy of each sample against its label."""
    logits = forward(model, x)
    y = _check_labels(y, logits.shape[1])
    return -log_softmax(logits)[np.arange(len(y)), y]


def backward_ce(model, x, y) -> tuple[float, GradientSet]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    logits, cache = forward(model, x, return_cache=True)
    y = _check_labels(y, logits.shape[1])
    logp = log_softmax(logits)
    b = len(y)
    loss = float(-logp[np.arange(b), y].mean())
    d = np.exp(logp)
    d[np.arange(b), y] -= 1.0
    return loss, backward(model, cache, d / b)


class SGD:
    """SGD with heavy-ball momentum: ``buf = mu * buf + g; p -= lr * buf``.

    Buffers are keyed by position in the parameter list, so pass parameters in
    the same order every step.
    """

    def __init__(self, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self.buffers: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.buffers is None:
            self.buffers = [np.zeros_like(p) for p in params]
        for p, g, buf in zip(params, grads, self.buffers, strict=True):
            if p.shape != g.shape:
                raise InvalidInputError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            buf *= self.momentum
            buf += g
            p -= self.lr * buf


def model_params(model: Model) -> list[np.ndarray]:
    return [l.weight for l in model.layers] + [l.bias for l in model.layers]


def grads_list(grads: GradientSet) -> list[np.ndarray]:
    return list(grads.weights) + list(grads.biases)


def shuffle_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SHUFFLE_STREAM])


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches over ``range(n)``; shuffled when ``rng`` is given, short last batch kept."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def accuracy_of(model, x, y) -> float:
    return float(100.0 * np.mean(np.argmax(forward(model, x), axis=1) == np.asarray(y)))


def train(model: Model, x, y, epochs: int, lr: float, momentum: float = 0.9,
          batch_size: int = 32, seed: int = 0) -> list[dict]:
    """Minibatch SGD on mean cross-entropy, in place. Returns per-epoch loss and accuracy."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ConfigError("cannot train on an empty dataset")
    opt = SGD(lr, momentum)
    rng = shuffle_rng(seed)
    params = model_params(model)
    log = []
    for epoch in range(epochs):
        total = 0.0
        for idx in batches(len(x), batch_size, rng):
            loss, grads = backward_ce(model, x[idx], y[idx])
            opt.step(params, grads_list(grads))
            total += loss * len(idx)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NumericalError(f"training diverged at epoch {epoch + 1}")
        log.append({"epoch": epoch + 1, "loss": total / len(x), "accuracy": accuracy_of(model, x, y)})
    return log


def model_to_dict(model: Model) -> dict:
    return {
        "format": CKPT_FORMAT,
        "layers": [
            {**layer.spec.to_dict(), "weight": layer.weight.tolist(), "bias": layer.bias.tolist()}
            for layer in model.layers
        ],
        "num_classes": model.num_classes,
        "seed": model.seed,
    }


def model_from_dict(d: dict) -> Model:
    if d.get("format") != CKPT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {d.get('format')!r}")
    layers = []
    for entry in d["layers"]:
        entry = dict(entry)
        w = np.array(entry.pop("weight"), dtype=np.float64)
        b = np.array(entry.pop("bias"), dtype=np.float64)
        spec = LayerSpec.from_dict(entry)
        if w.shape != spec.weight_shape or b.shape != (spec.weight_shape[0],):
            raise ConfigError(f"checkpoint weight shape {w.shape} does not match layer spec {spec.weight_shape}")
        layers.append(Layer(spec, w, b))
    check_spec([l.spec for l in layers])
    return Model(layers=layers, num_classes=int(d["num_classes"]), seed=int(d.get("seed", 0)))


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    d = model_to_dict(model)
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d))


def load_checkpoint(path) -> tuple[Model, dict]:
    d = json.loads(Path(path).read_text())
    model = model_from_dict(d)
    extra = {k: v for k, v in d.items() if k not in ("format", "layers", "num_classes", "seed")}
    return model, extra
