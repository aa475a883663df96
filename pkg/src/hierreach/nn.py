"""Small feed-forward networks: evaluation, Lipschitz bounds, SGD training, weight files.

A network carries its own input normalization (each state dimension mapped
affinely to [0, 1]) and an output scale that maps raw outputs in (-1, 1)
onto an actuator range.  All evaluation here is plain numpy.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear")

# Lipschitz factor of each activation (global slope bound).
ACTIVATION_LIPSCHITZ = {"relu": 1.0, "tanh": 1.0, "sigmoid": 0.25, "linear": 1.0}


class WeightFileError(ValueError):
    """Raised when a weight file cannot be parsed into a network."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _activate_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation given pre-activation z and output a."""
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if w.ndim != 2:
            raise ValueError("layer weights must be a matrix")
        if w.shape[0] != b.shape[0]:
            raise ValueError(f"weight rows {w.shape[0]} != bias length {b.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite weight or bias")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class NeuralNetwork:
    """Immutable feed-forward network with input normalization and output scale.

    ``forward`` returns the raw network output (after the last activation);
    ``scaled`` maps it affinely from (-1, 1) onto ``output_scale``.
    """

    layers: tuple[Layer, ...]
    norm_lo: np.ndarray = None
    norm_hi: np.ndarray = None
    output_scale: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise ValueError(
                    f"layer {k} output dim {layers[k].out_dim} does not chain "
                    f"into layer {k + 1} input dim {layers[k + 1].in_dim}"
                )
        n = layers[0].in_dim
        lo = np.zeros(n) if self.norm_lo is None else np.array(self.norm_lo, dtype=float)
        hi = np.ones(n) if self.norm_hi is None else np.array(self.norm_hi, dtype=float)
        if lo.shape != (n,) or hi.shape != (n,):
            raise ValueError("normalization bounds must match input_dim")
        if np.any(hi - lo == 0.0) or not np.all(np.isfinite(hi - lo)):
            raise ValueError("normalization must be invertible (nonzero scale per dimension)")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "norm_lo", lo)
        object.__setattr__(self, "norm_hi", hi)
        object.__setattr__(self, "output_scale", (float(self.output_scale[0]), float(self.output_scale[1])))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def input_scale(self) -> np.ndarray:
        return 1.0 / (self.norm_hi - self.norm_lo)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.norm_lo) * self.input_scale

    def forward(self, x) -> np.ndarray:
        """Raw output for one state (shape (n,)) or a batch (shape (N, n))."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input of dimension {self.input_dim}, got {x.shape[-1]}")
        a = self.normalize(x)
        for layer in self.layers:
            a = _activate(layer.activation, a @ layer.weights.T + layer.bias)
        return a

    __call__ = forward

    def scale_output(self, raw):
        lo, hi = self.output_scale
        return lo + (np.asarray(raw) + 1.0) * 0.5 * (hi - lo)

    def unscale_output(self, y):
        lo, hi = self.output_scale
        return 2.0 * (np.asarray(y, dtype=float) - lo) / (hi - lo) - 1.0

    @property
    def output_gain(self) -> float:
        """Slope of the raw -> scaled output map."""
        lo, hi = self.output_scale
        return 0.5 * (hi - lo)

    def scaled(self, x) -> np.ndarray:
        return self.scale_output(self.forward(x))


def forward(net: NeuralNetwork, x) -> np.ndarray:
    return net.forward(x)


def mlp(sizes: Sequence[int], hidden: str = "relu", output: str = "tanh", seed: int = 0, **kwargs) -> NeuralNetwork:
    """Randomly initialised network with layer widths ``sizes``.

    Weights and biases are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    """
    rng = np.random.default_rng(seed)
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = output if k == len(sizes) - 2 else hidden
        layers.append(Layer(w, b, act))
    return NeuralNetwork(tuple(layers), **kwargs)


def default_architecture(input_dim: int, output_dim: int = 1, seed: int = 0, **kwargs) -> NeuralNetwork:
    """Two hidden layers of ten ReLU units and a tanh output layer."""
    return mlp([input_dim, 10, 10, output_dim], hidden="relu", output="tanh", seed=seed, **kwargs)


def _operator_norm(w: np.ndarray, norm: str) -> float:
    if norm == "l2":
        return float(np.linalg.norm(w, 2))
    if norm == "linf":
        return float(np.max(np.sum(np.abs(w), axis=1)))
    raise ValueError(f"unsupported norm {norm!r}")


def lipschitz_bound(net: NeuralNetwork, norm: str = "l2", dims=None) -> float:
    """Upper bound on the Lipschitz constant of ``net.forward`` in raw input units.

    Product over layers of the weight operator norm and the activation slope
    bound; the input normalization is folded into the first layer.  ``dims``
    restricts the bound to variations along a subset of input dimensions.
    """
    bound = 1.0
    for k, layer in enumerate(net.layers):
        w = layer.weights
        if k == 0:
            w = w * net.input_scale
            if dims is not None:
                w = w[:, list(dims)]
        bound *= _operator_norm(w, norm) * ACTIVATION_LIPSCHITZ[layer.activation]
    return bound


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingDataset:
    inputs: np.ndarray  # (N, n) raw states
    targets: np.ndarray  # (N, m) raw network targets in output activation units
    norm_lo: np.ndarray
    norm_hi: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        t = np.asarray(self.targets, dtype=float)
        self.targets = t.reshape(len(t), -1)
        self.norm_lo = np.asarray(self.norm_lo, dtype=float)
        self.norm_hi = np.asarray(self.norm_hi, dtype=float)
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have equal length")
        if np.any(self.norm_hi - self.norm_lo == 0.0):
            raise ValueError("normalization must have nonzero scale in every dimension")

    def __len__(self):
        return len(self.inputs)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    hidden: tuple[int, ...] = (10, 10)
    hidden_activation: str = "relu"
    output_activation: str = "tanh"
    optimizer: str = "sgd"  # or "adam"
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class TrainResult:
    net: NeuralNetwork
    mse: float
    history: list[float] = field(default_factory=list)


def train(data: TrainingDataset, cfg: TrainConfig | None = None, output_scale=(-1.0, 1.0)) -> TrainResult:
    """Fit a network to ``data`` by plain mini-batch SGD on mean squared error."""
    cfg = cfg or TrainConfig()
    if len(data) == 0:
        raise ValueError("empty training dataset")
    n_in = data.inputs.shape[1]
    n_out = data.targets.shape[1]
    init = mlp(
        [n_in, *cfg.hidden, n_out],
        hidden=cfg.hidden_activation,
        output=cfg.output_activation,
        seed=cfg.seed,
    )
    ws = [np.array(l.weights) for l in init.layers]
    bs = [np.array(l.bias) for l in init.layers]
    acts = [l.activation for l in init.layers]
    if cfg.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    moments = [[np.zeros_like(p), np.zeros_like(p)] for p in ws + bs]
    t_adam = 0

    def update(k: int, param: np.ndarray, g: np.ndarray) -> None:
        if cfg.optimizer == "sgd":
            param -= cfg.learning_rate * g
            return
        m, v = moments[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t_adam)
        v_hat = v / (1.0 - cfg.beta2 ** t_adam)
        param -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)

    x_all = (data.inputs - data.norm_lo) / (data.norm_hi - data.norm_lo)
    y_all = data.targets
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    n = len(x_all)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            a = x_all[idx]
            zs, outs = [], [a]
            for w, b, act in zip(ws, bs, acts):
                z = a @ w.T + b
                a = _activate(act, z)
                zs.append(z)
                outs.append(a)
            grad = 2.0 * (a - y_all[idx]) / (len(idx) * n_out)
            t_adam += 1
            for k in range(len(ws) - 1, -1, -1):
                grad = grad * _activate_grad(acts[k], zs[k], outs[k + 1])
                gw = grad.T @ outs[k]
                gb = grad.sum(axis=0)
                grad = grad @ ws[k]
                update(k, ws[k], gw)
                update(len(ws) + k, bs[k], gb)
        a = x_all
        for w, b, act in zip(ws, bs, acts):
            a = _activate(act, a @ w.T + b)
        loss = float(np.mean((a - y_all) ** 2))
        if not math.isfinite(loss):
            raise TrainingDiverged(epoch)
        history.append(loss)
    net = NeuralNetwork(
        tuple(Layer(w, b, act) for w, b, act in zip(ws, bs, acts)),
        norm_lo=data.norm_lo,
        norm_hi=data.norm_hi,
        output_scale=output_scale,
    )
    log.info("trained %s network, final mse %.3g", [n_in, *cfg.hidden, n_out], history[-1])
    return TrainResult(net, history[-1], history)


# --------------------------------------------------------------------------
# weight files


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _dump(obj, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(obj, dict):
        items = [f'{pad}  {json.dumps(k)}: {_dump(v, indent + 1).lstrip()}' for k, v in obj.items()]
        return pad + "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float, np.floating)) and not isinstance(v, bool) for v in obj):
            return pad + "[" + ", ".join(_fmt(v) for v in obj) + "]"
        items = [_dump(v, indent + 1) for v in obj]
        return pad + "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, (float, np.floating)):
        return pad + _fmt(obj)
    return pad + json.dumps(obj)


def to_dict(net: NeuralNetwork) -> dict:
    return {
        "input_dim": net.input_dim,
        "output_dim": net.output_dim,
        "normalization": {"lo": list(net.norm_lo), "hi": list(net.norm_hi)},
        "output_scale": {"lo": net.output_scale[0], "hi": net.output_scale[1]},
        "layers": [
            {"weights": [list(row) for row in l.weights], "bias": list(l.bias), "activation": l.activation}
            for l in net.layers
        ],
    }


def dumps(net: NeuralNetwork) -> str:
    return _dump(to_dict(net)) + "\n"


def save_weights(net: NeuralNetwork, path) -> None:
    Path(path).write_text(dumps(net))


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise WeightFileError(f"missing field '{where}{key}'")
    return d[key]


def from_dict(doc: dict) -> NeuralNetwork:
    input_dim = _require(doc, "input_dim", "")
    output_dim = _require(doc, "output_dim", "")
    norm = _require(doc, "normalization", "")
    lo = _require(norm, "lo", "normalization.")
    hi = _require(norm, "hi", "normalization.")
    scale = _require(doc, "output_scale", "")
    out_lo = _require(scale, "lo", "output_scale.")
    out_hi = _require(scale, "hi", "output_scale.")
    raw_layers = _require(doc, "layers", "")
    layers = []
    for k, entry in enumerate(raw_layers):
        where = f"layers[{k}]."
        w = _require(entry, "weights", where)
        b = _require(entry, "bias", where)
        act = _require(entry, "activation", where)
        try:
            w = np.array(w, dtype=float)
            b = np.array(b, dtype=float)
        except (TypeError, ValueError) as exc:
            raise WeightFileError(f"field '{where}weights' is not a numeric matrix: {exc}") from None
        if w.ndim != 2:
            raise WeightFileError(f"field '{where}weights' is not a rectangular matrix")
        try:
            layers.append(Layer(w, b, act))
        except ValueError as exc:
            raise WeightFileError(f"{where.rstrip('.')}: {exc}") from None
    try:
        net = NeuralNetwork(tuple(layers), norm_lo=lo, norm_hi=hi, output_scale=(out_lo, out_hi))
    except ValueError as exc:
        raise WeightFileError(str(exc)) from None
    if net.input_dim != input_dim or net.output_dim != output_dim:
        raise WeightFileError(
            f"declared dims ({input_dim}, {output_dim}) do not match layers ({net.input_dim}, {net.output_dim})"
        )
    return net


def loads(text: str) -> NeuralNetwork:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WeightFileError(f"malformed weight file at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_dict(doc)


def load_weights(path) -> NeuralNetwork:
    return loads(Path(path).read_text())
