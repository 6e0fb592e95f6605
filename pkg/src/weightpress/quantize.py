"""Weight sharing: per-layer k-means codebooks and their fine-tuning.

Each layer's surviving weights are clustered into k = 2^bits shared values.
Connections then store a small index into the codebook instead of a float.
Fine-tuning keeps the index assignment fixed and moves the shared values:
the gradient of a centroid is the sum of the gradients of every weight
assigned to it, so all members of a cluster move together.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .mnist import Dataset
from .nets import Network, TrainConfig, backward
from .pruning import SparseLayer

log = logging.getLogger(__name__)

INIT_METHODS = ("forgy", "density", "linear")


@dataclass
class QuantConfig:
    bits: int = 6
    init_method: str = "linear"
    max_iters: int = 100
    rel_tol: float = 1e-6
    seed: int = 0
    finetune: TrainConfig | None = None

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError("bits must be in 1..16")
        if self.init_method not in INIT_METHODS:
            raise ValueError(f"init_method must be one of {INIT_METHODS}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be non-negative")

    @property
    def k(self) -> int:
        return 1 << self.bits


@dataclass
class ClusterResult:
    codebook: np.ndarray  # (k,) float32
    assignment: np.ndarray  # (n,) int32, index of nearest centroid
    wcss: float
    iterations_run: int
    wcss_history: list[float]


def init_centroids(weights: np.ndarray, k: int, method: str, seed: int) -> np.ndarray:
    """Initial centroids by observation sampling, CDF spacing, or range spacing."""
    weights = np.asarray(weights).ravel()
    if weights.size == 0:
        raise ValueError("cannot initialize centroids from no weights")
    if k < 1:
        raise ValueError("k must be >= 1")

    if method == "linear":
        lo, hi = float(weights.min()), float(weights.max())
        if k == 1:
            return np.array([lo], dtype=np.float32)
        return (lo + np.arange(k) * (hi - lo) / (k - 1)).astype(np.float32)

    if method == "density":
        qs = (np.arange(k) + 0.5) / k
        return np.quantile(weights.astype(np.float64), qs).astype(np.float32)

    if method == "forgy":
        distinct = np.unique(weights)
        if distinct.size < k:
            pad = init_centroids(weights, k - distinct.size, "linear", seed)
            log.warning(
                "forgy: only %d distinct values for k=%d, padding with linear spacing",
                distinct.size,
                k,
            )
            return np.concatenate([distinct.astype(np.float32), pad])
        rng = np.random.default_rng(seed)
        picks = []
        seen = set()
        while len(picks) < k:
            v = float(weights[rng.integers(weights.size)])
            if v not in seen:
                seen.add(v)
                picks.append(v)
        return np.array(picks, dtype=np.float32)

    raise ValueError(f"unknown init method {method!r}")


def _assign(values: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, float]:
    # argmin returns the first minimum, so ties go to the lower centroid index
    d = (values[:, None] - centroids[None, :]) ** 2
    assignment = np.argmin(d, axis=1)
    wcss = float(d[np.arange(values.size), assignment].sum())
    return assignment.astype(np.int32), wcss


def kmeans(
    weights: np.ndarray,
    initial_centroids: np.ndarray,
    max_iters: int = 100,
    rel_tol: float = 1e-6,
) -> ClusterResult:
    """Lloyd iterations over 1-D weights until the WCSS improvement stalls.

    An empty cluster is re-seeded at the point farthest from its current
    centroid rather than dropped, so k never shrinks.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("cannot cluster an empty weight set")
    c = np.asarray(initial_centroids, dtype=np.float64).copy()
    k = c.size

    history = []
    iterations = 0
    for _ in range(max_iters):
        assignment, wcss = _assign(w, c)
        iterations += 1
        history.append(wcss)
        if len(history) >= 2:
            prev = history[-2]
            if prev == 0.0 or (prev - wcss) <= rel_tol * prev:
                break
        counts = np.bincount(assignment, minlength=k)
        sums = np.bincount(assignment, weights=w, minlength=k)
        filled = counts > 0
        c[filled] = sums[filled] / counts[filled]
        for j in np.flatnonzero(~filled):
            c[j] = w[np.argmax(np.abs(w - c[j]))]

    codebook = c.astype(np.float32)
    assignment, wcss = _assign(w, codebook.astype(np.float64))
    return ClusterResult(codebook, assignment, wcss, iterations, history)


def quantize_layer(layer: SparseLayer, config: QuantConfig) -> tuple[np.ndarray, np.ndarray]:
    """Cluster the layer's surviving values; returns (codebook, assignment).

    Fillers and pruned positions never enter the clustering.  If the layer
    has fewer survivors than clusters the codebook degenerates to the
    distinct surviving values.
    """
    survivors = layer.stream.values[~layer.stream.fillers]
    if survivors.size < 1:
        raise ValueError("cannot quantize a layer with no surviving weights")
    k = config.k
    if survivors.size < k:
        codebook = np.unique(survivors).astype(np.float32)
        log.warning(
            "layer has %d survivors for k=%d; using %d distinct values",
            survivors.size,
            k,
            codebook.size,
        )
        assignment, _ = _assign(survivors.astype(np.float64), codebook.astype(np.float64))
        return codebook, assignment
    init = init_centroids(survivors, k, config.init_method, config.seed)
    result = kmeans(survivors, init, config.max_iters, config.rel_tol)
    return result.codebook, result.assignment


def materialize_weights(
    mask: np.ndarray, codebook: np.ndarray, assignment: np.ndarray
) -> np.ndarray:
    """Dense weights where every survivor is a codebook lookup, zeros elsewhere."""
    w = np.zeros(mask.shape, dtype=np.float32)
    w[mask != 0] = codebook[assignment]
    return w


def centroid_gradients(
    weight_grads: np.ndarray, assignment: np.ndarray, mask: np.ndarray, k: int
) -> np.ndarray:
    """Sum of the surviving weights' gradients, grouped per centroid index."""
    g = np.asarray(weight_grads)[mask != 0]
    if g.shape != assignment.shape:
        raise ValueError("assignment does not cover the surviving weights")
    return np.bincount(assignment, weights=g.astype(np.float64), minlength=k)


def finetune_quantized(
    net: Network,
    codebooks: list[np.ndarray],
    assignments: list[np.ndarray],
    masks: list[np.ndarray],
    dataset: Dataset,
    config: TrainConfig,
    lr_schedule=None,
) -> list[np.ndarray]:
    """SGD on the shared values with assignments frozen.

    Every step computes dense gradients, groups them per centroid, nudges
    the codebooks and re-materializes the weights from them, so members of
    a cluster stay bit-identical and pruned weights stay zero.  Biases keep
    training normally.  The network is mutated in place; the updated
    codebooks are returned.
    """
    if not (len(codebooks) == len(assignments) == len(masks) == len(net.layers)):
        raise ValueError("codebooks, assignments and masks must cover every layer")
    codebooks = [cb.astype(np.float32).copy() for cb in codebooks]
    for layer, cb, asg, m in zip(net.layers, codebooks, assignments, masks):
        layer.weights = materialize_weights(m, cb, asg)

    rng = np.random.default_rng(config.seed)
    step = 0
    for epoch in range(config.epochs):
        lr = config.learning_rate if lr_schedule is None else float(lr_schedule(epoch))
        order = rng.permutation(dataset.count)
        for start in range(0, dataset.count, config.batch_size):
            idx = order[start : start + config.batch_size]
            grads, loss = backward(net, dataset.samples[idx], dataset.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(step)
            for i, layer in enumerate(net.layers):
                cg = centroid_gradients(
                    grads.weight_grads[i], assignments[i], masks[i], codebooks[i].size
                )
                codebooks[i] -= (lr * cg).astype(np.float32)
                layer.bias -= np.asarray(lr * grads.bias_grads[i], dtype=layer.bias.dtype)
                layer.weights = materialize_weights(masks[i], codebooks[i], assignments[i])
            step += 1
    return codebooks


def compression_rate(n: int, b: int, k: int) -> float:
    """Storage ratio of n b-bit weights against k shared values plus indices.

    Uses the exact log2(k) index cost; integer-width storage accounting is
    the container's job.
    """
    if n < 1 or k < 1 or b < 1:
        raise ValueError("n, b and k must all be >= 1")
    return n * b / (n * np.log2(k) + k * b)
