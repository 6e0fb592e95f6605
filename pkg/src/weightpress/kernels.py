"""Forward kernels over dense, sparse and codebook-indirect layers.

The sparse paths work straight off the relative-index stream: positions
are recovered from the gaps and contributions summed per output row,
never materializing a dense matrix.  The quantized path additionally
resolves each contribution through the codebook, one indirection per
surviving weight.  Row sums accumulate in float64 in entry order, so each
path is individually reproducible bit for bit.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from .container import STAGE_DENSE, CompressedModel, reconstruct_dense
from .errors import CorruptionError
from .mnist import Dataset
from .nets import softmax
from .pruning import SparseLayer


def gemm_dense(weights: np.ndarray, x_batch: np.ndarray, bias: np.ndarray | None = None):
    """Dense batched product: (n, in) -> (n, out)."""
    x_batch = np.asarray(x_batch)
    if x_batch.ndim != 2 or x_batch.shape[1] != weights.shape[1]:
        raise ValueError(f"batch shape {x_batch.shape} does not match {weights.shape}")
    y = x_batch @ weights.T
    if bias is not None:
        y = y + bias
    return y


def gemv_dense(weights: np.ndarray, x: np.ndarray, bias: np.ndarray | None = None):
    """Single-vector product; exactly the batch kernel applied to one row."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError("gemv takes a 1-D vector")
    return gemm_dense(weights, x[None, :], bias)[0]


def _stream_coords(layer: SparseLayer):
    """(rows, cols, values) of genuine entries, decoded from the gap stream."""
    stream = layer.stream
    pos = stream.positions()
    if stream.entry_count and pos[-1] >= stream.logical_length:
        raise CorruptionError("decoded position outside the layer")
    genuine = ~stream.fillers
    pos = pos[genuine]
    n_cols = layer.shape[1]
    return pos // n_cols, pos % n_cols, stream.values[genuine]


def spmv_relative(layer: SparseLayer, x: np.ndarray, bias: np.ndarray | None = None):
    """y_i = sum of value * x_col over the layer's surviving entries."""
    x = np.asarray(x)
    if x.shape != (layer.shape[1],):
        raise ValueError(f"input shape {x.shape} does not match {layer.shape}")
    rows, cols, values = _stream_coords(layer)
    y = np.bincount(rows, weights=values * x[cols], minlength=layer.shape[0])
    if bias is not None:
        y = y + bias
    return y.astype(np.float32)


def spmv_quantized(
    layer: SparseLayer,
    indices: np.ndarray,
    codebook: np.ndarray,
    x: np.ndarray,
    bias: np.ndarray | None = None,
):
    """Sparse product with one codebook indirection per contribution."""
    x = np.asarray(x)
    if x.shape != (layer.shape[1],):
        raise ValueError(f"input shape {x.shape} does not match {layer.shape}")
    if len(indices) != layer.nnz:
        raise CorruptionError("index stream does not cover the genuine entries")
    if len(indices) and np.max(indices) >= len(codebook):
        raise CorruptionError("codebook index out of range")
    rows, cols, _ = _stream_coords(layer)
    y = np.bincount(rows, weights=codebook[indices] * x[cols], minlength=layer.shape[0])
    if bias is not None:
        y = y + bias
    return y.astype(np.float32)


# ------------------------------------------------------------ model execution


@dataclass
class _CompiledLayer:
    kind: str  # dense | sparse
    bias: np.ndarray
    dense: np.ndarray | None = None
    cols: np.ndarray | None = None
    values: np.ndarray | None = None  # codebook already resolved for quantized records
    row_starts: np.ndarray | None = None
    row_ends: np.ndarray | None = None


def _compile_sparse(layer: SparseLayer, values: np.ndarray, bias) -> _CompiledLayer:
    rows, cols, _ = _stream_coords(layer)
    bounds = np.searchsorted(rows, np.arange(layer.shape[0] + 1))
    return _CompiledLayer(
        "sparse", bias, cols=cols, values=values,
        row_starts=bounds[:-1], row_ends=bounds[1:],
    )


def _compile(model: CompressedModel) -> list[_CompiledLayer]:
    compiled = []
    for rec, bias in zip(model.layers, model.biases):
        if rec.stage == STAGE_DENSE:
            compiled.append(_CompiledLayer("dense", bias, dense=rec.dense_weights))
            continue
        layer = SparseLayer(rec.shape, rec.stream, rec.nnz)
        if rec.indices is not None:
            if rec.nnz and np.max(rec.indices) >= len(rec.codebook):
                raise CorruptionError(f"layer {rec.name}: codebook index out of range")
            values = rec.codebook[rec.indices]
        else:
            values = layer.stream.values[~layer.stream.fillers]
        compiled.append(_compile_sparse(layer, values, bias))
    return compiled


def _sparse_batch(cl: _CompiledLayer, x_batch: np.ndarray) -> np.ndarray:
    """Per-row segment sums via float64 prefix sums over the entry stream."""
    prod = x_batch[:, cl.cols].astype(np.float64) * cl.values
    prefix = np.zeros((x_batch.shape[0], prod.shape[1] + 1))
    np.cumsum(prod, axis=1, out=prefix[:, 1:])
    y = prefix[:, cl.row_ends] - prefix[:, cl.row_starts]
    return (y + cl.bias).astype(np.float32)


def _forward_compiled(compiled: list[_CompiledLayer], x_batch: np.ndarray) -> np.ndarray:
    a = np.asarray(x_batch, dtype=np.float32)
    for i, cl in enumerate(compiled):
        if cl.kind == "dense":
            z = gemm_dense(cl.dense, a, cl.bias)
        else:
            z = _sparse_batch(cl, a)
        a = softmax(z) if i == len(compiled) - 1 else np.maximum(z, 0)
    return a


def run_network_compressed(model: CompressedModel, x_batch: np.ndarray) -> np.ndarray:
    """Class probabilities computed entirely through compressed kernels."""
    x_batch = np.asarray(x_batch)
    single = x_batch.ndim == 1
    if single:
        x_batch = x_batch[None, :]
    probs = _forward_compiled(_compile(model), x_batch)
    return probs[0] if single else probs


def evaluate_compressed(
    model: CompressedModel, dataset: Dataset, batch_size: int = 128
) -> tuple[float, np.ndarray]:
    """Top-1 error and per-sample predictions through the compressed kernels."""
    if dataset.count == 0:
        raise ValueError("empty dataset")
    compiled = _compile(model)
    preds = np.empty(dataset.count, dtype=np.int64)
    for start in range(0, dataset.count, batch_size):
        probs = _forward_compiled(compiled, dataset.samples[start : start + batch_size])
        preds[start : start + batch_size] = np.argmax(probs, axis=1)
    return float(np.mean(preds != dataset.labels)), preds


# ----------------------------------------------------------------- benchmark


@dataclass
class BenchRow:
    layer: str
    representation: str
    batch: int
    median_us: float
    reps: int
    checksum: float
    weight_bytes: int
    flops: int

    @property
    def bytes_per_flop(self) -> float:
        """Memory-traffic-to-compute estimate; ~constant for MV, ~1/batch for MM."""
        total = self.weight_bytes  # activations are negligible next to weights here
        return total / self.flops if self.flops else 0.0


def _layer_representations(rec, bias):
    """Benchmarkable closures; every path does its full per-call work."""
    reprs = {}
    dense_w = reconstruct_dense(rec)
    reprs["dense"] = (lambda xb: gemm_dense(dense_w, xb, bias), 4 * dense_w.size)
    if rec.stream is None:
        return reprs
    layer = SparseLayer(rec.shape, rec.stream, rec.nnz)
    stream_bytes = (rec.stream.entry_count * rec.index_bits + 7) // 8 + (
        rec.stream.entry_count + 7
    ) // 8

    def run_sparse(xb):
        values = layer.stream.values[~layer.stream.fillers]
        if xb.shape[0] == 1:
            return spmv_relative(layer, xb[0], bias)[None, :]
        return _sparse_batch(_compile_sparse(layer, values, bias), xb)

    reprs["sparse"] = (run_sparse, 4 * rec.nnz + stream_bytes)
    if rec.indices is None:
        return reprs

    def run_quantized(xb):
        if xb.shape[0] == 1:
            return spmv_quantized(layer, rec.indices, rec.codebook, xb[0], bias)[None, :]
        return _sparse_batch(_compile_sparse(layer, rec.codebook[rec.indices], bias), xb)

    quant_bytes = (rec.nnz * rec.weight_bits + 7) // 8 + stream_bytes + 4 * len(rec.codebook)
    reprs["quantized"] = (run_quantized, quant_bytes)
    return reprs


def benchmark(
    model: CompressedModel, batch_sizes=(1, 64), repetitions: int = 5, seed: int = 0
) -> list[BenchRow]:
    """Median wall time per (layer, representation, batch size).

    Times are reported, never asserted: absolute numbers are hardware
    specific.  Checksums let callers confirm the representations agree.
    """
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions")
    rng = np.random.default_rng(seed)
    out = []
    for rec, bias in zip(model.layers, model.biases):
        out_dim, in_dim = rec.shape
        reprs = _layer_representations(rec, bias)
        for batch in batch_sizes:
            xb = rng.random((batch, in_dim), dtype=np.float32)
            for name, (fn, weight_bytes) in reprs.items():
                result = fn(xb)
                times = []
                for _ in range(repetitions):
                    t0 = time.perf_counter()
                    fn(xb)
                    times.append(time.perf_counter() - t0)
                eff_nnz = out_dim * in_dim if name == "dense" else rec.nnz
                out.append(
                    BenchRow(
                        layer=rec.name,
                        representation=name,
                        batch=batch,
                        median_us=float(np.median(times)) * 1e6,
                        reps=repetitions,
                        checksum=float(np.sum(result, dtype=np.float64)),
                        weight_bytes=weight_bytes,
                        flops=2 * eff_nnz * batch,
                    )
                )
    return out


def write_benchmark_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["layer", "representation", "batch", "median_us", "reps", "checksum",
             "weight_bytes", "flops", "bytes_per_flop"]
        )
        for r in rows:
            w.writerow(
                [r.layer, r.representation, r.batch, f"{r.median_us:.2f}", r.reps,
                 f"{r.checksum:.6e}", r.weight_bytes, r.flops, f"{r.bytes_per_flop:.6f}"]
            )
