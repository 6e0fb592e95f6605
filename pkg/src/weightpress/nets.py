"""Dense feed-forward networks: construction, training, evaluation.

Layers are fully connected with ReLU hidden activations and a softmax
output trained under cross-entropy.  Weights live in (out_dim, in_dim)
matrices so a batch forward step is ``a @ W.T + b``.  All stochastic
operations take explicit seeds and are bitwise deterministic for a fixed
seed in single-threaded mode.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, FormatError
from .mnist import Dataset

RELU = "relu"
SOFTMAX = "softmax"

_DENSE_MAGIC = b"WPDN"
_DENSE_VERSION = 1
_ACT_CODES = {RELU: 0, SOFTMAX: 1}
_ACT_NAMES = {code: name for name, code in _ACT_CODES.items()}


@dataclass
class LayerSpec:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError("weights must be a 2-D matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal out_dim")
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not np.all(np.isfinite(self.weights)) or not np.all(np.isfinite(self.bias)):
            raise ValueError("non-finite layer parameters")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Network:
    layers: list[LayerSpec]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer sizes {a.out_dim} and {b.in_dim} do not chain")
        for i, layer in enumerate(self.layers):
            want = SOFTMAX if i == len(self.layers) - 1 else RELU
            if layer.activation != want:
                raise ValueError(f"layer {i} must use {want}")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    def copy(self) -> "Network":
        return Network(
            [LayerSpec(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def astype(self, dtype) -> "Network":
        return Network(
            [
                LayerSpec(l.weights.astype(dtype), l.bias.astype(dtype), l.activation)
                for l in self.layers
            ]
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class GradientSet:
    """Per-layer weight and bias gradients, shapes mirroring the network."""

    weight_grads: list[np.ndarray] = field(default_factory=list)
    bias_grads: list[np.ndarray] = field(default_factory=list)


def init_network(dims: list[int], seed: int) -> Network:
    """He-initialized network: Gaussian weights with std sqrt(2/in_dim), zero biases."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dimensions")
    if any(d <= 0 for d in dims):
        raise ValueError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        std = np.sqrt(2.0 / din)
        w = (rng.standard_normal((dout, din)) * std).astype(np.float32)
        b = np.zeros(dout, dtype=np.float32)
        act = SOFTMAX if i == len(dims) - 2 else RELU
        layers.append(LayerSpec(w, b, act))
    return Network(layers)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(x: np.ndarray, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError(f"input shape {x.shape} does not match in_dim {in_dim}")
    return x, single


def forward(net: Network, x: np.ndarray) -> list[np.ndarray]:
    """Per-layer post-activation outputs; the last entry is the class probabilities."""
    x, single = _as_batch(x, net.layers[0].in_dim)
    a = x.astype(net.layers[0].weights.dtype, copy=False)
    outs = []
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        a = softmax(z) if layer.activation == SOFTMAX else np.maximum(z, 0)
        outs.append(a)
    if single:
        outs = [o[0] for o in outs]
    return outs


def backward(net: Network, x: np.ndarray, labels: np.ndarray) -> tuple[GradientSet, float]:
    """Gradients of the mean cross-entropy over the batch, plus the loss itself."""
    x, _ = _as_batch(x, net.layers[0].in_dim)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValueError("batch and labels are not aligned")
    n_classes = net.layers[-1].out_dim
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range 0..{n_classes - 1}")

    dtype = net.layers[0].weights.dtype
    a = x.astype(dtype, copy=False)
    acts = [a]
    last_z = None
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        if layer.activation == SOFTMAX:
            last_z = z
            a = softmax(z)
        else:
            a = np.maximum(z, 0)
        acts.append(a)

    n = x.shape[0]
    # loss via log-sum-exp so tiny probabilities cannot underflow to -inf
    zmax = last_z.max(axis=1, keepdims=True)
    log_probs = last_z - zmax - np.log(np.exp(last_z - zmax).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())

    one_hot = np.zeros_like(acts[-1])
    one_hot[np.arange(n), labels] = 1
    delta = (acts[-1] - one_hot) / n

    grads = GradientSet([None] * len(net.layers), [None] * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        grads.weight_grads[i] = delta.T @ acts[i]
        grads.bias_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.layers[i].weights) * (acts[i] > 0)
    return grads, loss


def sgd_train(
    net: Network,
    dataset: Dataset,
    config: TrainConfig,
    mask: list[np.ndarray] | None = None,
    lr_schedule=None,
) -> tuple[Network, list[float]]:
    """Mini-batch SGD, mutating ``net`` in place.

    When ``mask`` is given every masked-out weight is pinned to exactly 0.0
    after every update.  ``lr_schedule``, if given, maps an epoch index to a
    learning rate and overrides the configured constant rate.  The returned
    loss history has one entry per step: epochs * ceil(count / batch_size).
    """
    if mask is not None:
        if len(mask) != len(net.layers):
            raise ValueError("mask must cover every layer")
        for m, layer in zip(mask, net.layers):
            if m.shape != layer.weights.shape:
                raise ValueError("mask shape does not match weights")
            layer.weights *= m.astype(layer.weights.dtype)

    rng = np.random.default_rng(config.seed)
    losses = []
    step = 0
    for epoch in range(config.epochs):
        lr = config.learning_rate if lr_schedule is None else float(lr_schedule(epoch))
        order = rng.permutation(dataset.count)
        for start in range(0, dataset.count, config.batch_size):
            idx = order[start : start + config.batch_size]
            grads, loss = backward(net, dataset.samples[idx], dataset.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(step)
            losses.append(loss)
            for i, layer in enumerate(net.layers):
                dw = grads.weight_grads[i]
                if config.weight_decay:
                    dw = dw + config.weight_decay * layer.weights
                layer.weights -= np.asarray(lr * dw, dtype=layer.weights.dtype)
                layer.bias -= np.asarray(lr * grads.bias_grads[i], dtype=layer.bias.dtype)
                if mask is not None:
                    layer.weights *= mask[i].astype(layer.weights.dtype)
            step += 1
    return net, losses


def predict(net: Network, samples: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest class id."""
    out = np.empty(samples.shape[0], dtype=np.int64)
    for start in range(0, samples.shape[0], batch_size):
        probs = forward(net, samples[start : start + batch_size])[-1]
        out[start : start + batch_size] = np.argmax(probs, axis=1)
    return out


def evaluate(net: Network, dataset: Dataset) -> float:
    """Top-1 error rate on the dataset, in [0, 1]."""
    if dataset.count == 0:
        raise ValueError("empty dataset")
    pred = predict(net, dataset.samples)
    return float(np.mean(pred != dataset.labels))


def save_network(path, net: Network) -> None:
    """Little-endian dense model file: magic WPDN, version, then raw layers."""
    with open(path, "wb") as f:
        f.write(_DENSE_MAGIC)
        f.write(struct.pack("<HH", _DENSE_VERSION, len(net.layers)))
        for layer in net.layers:
            f.write(
                struct.pack(
                    "<IIB", layer.in_dim, layer.out_dim, _ACT_CODES[layer.activation]
                )
            )
            f.write(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _DENSE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_DENSE_MAGIC!r}")
    version, n_layers = struct.unpack_from("<HH", raw, 4)
    if version != _DENSE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 8
    layers = []
    for _ in range(n_layers):
        if off + 9 > len(raw):
            raise FormatError(f"{path}: truncated layer header")
        din, dout, act = struct.unpack_from("<IIB", raw, off)
        off += 9
        need = 4 * (din * dout + dout)
        if off + need > len(raw):
            raise FormatError(f"{path}: truncated layer payload")
        w = np.frombuffer(raw, dtype="<f4", count=din * dout, offset=off).reshape(dout, din)
        off += 4 * din * dout
        b = np.frombuffer(raw, dtype="<f4", count=dout, offset=off)
        off += 4 * dout
        layers.append(LayerSpec(w.copy(), b.copy(), _ACT_NAMES[act]))
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return Network(layers)
