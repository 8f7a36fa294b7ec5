"""Layers, the sequential model container, losses, optimizers and the clean training loop."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---- layer records ------------------------------------------------------------

@dataclass
class Dense:
    name: str
    units: int
    kind: str = field(default="dense", init=False)


@dataclass
class Conv2D:
    name: str
    filters: int
    kernel: int = 3
    padding: str = "same"
    stride: int = 1
    kind: str = field(default="conv2d", init=False)


@dataclass
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass
class MaxPool:
    size: int = 2
    kind: str = field(default="maxpool", init=False)


@dataclass
class Flatten:
    kind: str = field(default="flatten", init=False)


_LAYER_TYPES = {"dense": Dense, "conv2d": Conv2D, "relu": ReLU, "maxpool": MaxPool, "flatten": Flatten}


def layer_to_dict(layer) -> dict:
    return asdict(layer)


def layer_from_dict(d: dict):
    d = dict(d)
    cls = _LAYER_TYPES[d.pop("kind")]
    return cls(**d)


def _out_shape(layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "dense":
        if len(shape) != 1:
            raise ValueError(f"dense layer {layer.name} needs a flat input, got {shape}")
        return (layer.units,)
    if layer.kind == "conv2d":
        if len(shape) != 3:
            raise ValueError(f"conv layer {layer.name} needs an HWC input, got {shape}")
        h, w, _ = shape
        if layer.padding == "same":
            return (-(-h // layer.stride), -(-w // layer.stride), layer.filters)
        return ((h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1, layer.filters)
    if layer.kind == "maxpool":
        return (shape[0] // layer.size, shape[1] // layer.size, shape[2])
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


ARCHITECTURES: dict[str, Callable[[int], list]] = {
    "mini-cnn": lambda k: [
        Conv2D("conv1", 8), ReLU(), MaxPool(),
        Conv2D("conv2", 16), ReLU(), MaxPool(),
        Flatten(), Dense("fc1", 128), ReLU(), Dense("fc2", k),
    ],
    "mlp": lambda k: [Flatten(), Dense("fc1", 256), ReLU(), Dense("fc2", k)],
    # small variants for fast property tests
    "tiny-cnn": lambda k: [
        Conv2D("conv1", 4), ReLU(), MaxPool(), Flatten(), Dense("fc1", 16), ReLU(), Dense("fc2", k),
    ],
    "tiny-mlp": lambda k: [Flatten(), Dense("fc1", 12), ReLU(), Dense("fc2", k)],
}


class Model:
    """A sequential network: ordered layer records plus named weight and bias tensors."""

    def __init__(self, layers, input_shape, weights, biases, architecture_id="custom"):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.weights: dict[str, Tensor] = dict(weights)
        self.biases: dict[str, Tensor] = dict(biases)
        self.architecture_id = architecture_id
        self.shapes = self._check_shapes()

    @classmethod
    def build(cls, layers, input_shape, seed: int = 0, architecture_id: str = "custom", dtype=np.float32):
        """Create a model with He-uniform weights (limit sqrt(6 / fan_in)) and zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = {}, {}
        shape = tuple(input_shape)
        for layer in layers:
            if layer.kind == "dense":
                fan_in = shape[0]
                wshape = (fan_in, layer.units)
            elif layer.kind == "conv2d":
                fan_in = layer.kernel * layer.kernel * shape[2]
                wshape = (layer.kernel, layer.kernel, shape[2], layer.filters)
            else:
                shape = _out_shape(layer, shape)
                continue
            limit = np.sqrt(6.0 / fan_in)
            name = f"{layer.name}/kernel"
            if name in weights:
                raise ValueError(f"duplicate layer name {layer.name}")
            weights[name] = Tensor(rng.uniform(-limit, limit, wshape).astype(dtype), requires_grad=True)
            biases[f"{layer.name}/bias"] = Tensor(np.zeros(wshape[-1], dtype=dtype), requires_grad=True)
            shape = _out_shape(layer, shape)
        return cls(layers, input_shape, weights, biases, architecture_id)

    def _check_shapes(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            shape = _out_shape(layer, shapes[-1])
            if layer.kind in ("dense", "conv2d"):
                w = self.weights[f"{layer.name}/kernel"]
                if layer.kind == "dense" and w.shape != (shapes[-1][0], layer.units):
                    raise ValueError(f"weight shape {w.shape} does not compose at {layer.name}")
                if layer.kind == "conv2d" and w.shape != (layer.kernel, layer.kernel, shapes[-1][2], layer.filters):
                    raise ValueError(f"kernel shape {w.shape} does not compose at {layer.name}")
            if min(shape) <= 0:
                raise ValueError(f"layer {layer} collapses the shape {shapes[-1]}")
            shapes.append(shape)
        return shapes

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def parameters(self) -> dict[str, Tensor]:
        return {**self.weights, **self.biases}

    def forward(self, batch, weights=None, biases=None) -> Tensor:
        """Return pre-softmax logits; ``weights``/``biases`` override the stored tensors."""
        weights = self.weights if weights is None else weights
        biases = self.biases if biases is None else biases
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        for layer in self.layers:
            x = apply_layer(layer, x, weights, biases)
        return x

    __call__ = forward

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def copy(self) -> "Model":
        clone = copy.copy(self)
        clone.layers = [copy.copy(layer) for layer in self.layers]
        clone.weights = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.weights.items()}
        clone.biases = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.biases.items()}
        return clone

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def apply_layer(layer, x: Tensor, weights, biases) -> Tensor:
    if layer.kind == "dense":
        return T.add(T.matmul(x, weights[f"{layer.name}/kernel"]), biases[f"{layer.name}/bias"])
    if layer.kind == "conv2d":
        y = T.conv2d(x, weights[f"{layer.name}/kernel"], layer.stride, layer.padding)
        return T.add(y, biases[f"{layer.name}/bias"])
    if layer.kind == "relu":
        return T.relu(x)
    if layer.kind == "maxpool":
        return T.maxpool2d(x, layer.size)
    if layer.kind == "flatten":
        return T.flatten(x)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def build_model(architecture_id: str, input_shape, num_classes: int, seed: int = 0) -> Model:
    if architecture_id not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture_id!r}")
    return Model.build(ARCHITECTURES[architecture_id](num_classes), input_shape, seed, architecture_id)


# ---- losses ---------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per logit row required")
    if np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"label out of range [0, {k})")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = -1.0 / n
    return T.reduce("sum", T.mul(T.log_softmax(logits), onehot))


# ---- optimizers -------------------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, params: dict[str, Tensor], lr: float = 0.01):
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p in self.params.values():
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class Adam:
    """Adam with bias-corrected moments; updates parameter arrays in place."""

    kind = "adam"

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---- training ---------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict_logits(model: Model, X: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(X), batch_size):
            out.append(model(X[start:start + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def accuracy(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    if len(X) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(predict_logits(model, X).argmax(axis=1) == y))


def train_clean(model: Model, X: np.ndarray, y: np.ndarray, epochs: int, batch_size: int = 32,
                optimizer=None, seed: int = 0, eval_data=None, history: list | None = None) -> Model:
    """Plain supervised training; returns ``model`` (updated in place).

    ``eval_data`` is an optional ``(X, y)`` pair scored for CDA after every epoch;
    per-epoch records are appended to ``history`` when given.
    """
    if len(X) == 0:
        raise ValueError("empty training set")
    if epochs <= 0:
        return model
    params = model.parameters()
    opt = optimizer or Adam(params, lr=5e-4)
    rng = np.random.default_rng(seed)
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in minibatches(len(X), batch_size, rng):
            opt.zero_grad()
            try:
                loss = cross_entropy(model(X[idx]), y[idx])
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {opt.t + 1}: {exc}") from exc
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        record = {"epoch": epoch, "loss": total / count}
        if eval_data is not None:
            record["cda"] = accuracy(model, *eval_data)
        log.info("train_clean %s", record)
        if history is not None:
            history.append(record)
    return model
