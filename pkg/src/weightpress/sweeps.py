"""Sweep experiments: quantization bits, compression-rate tradeoffs, inits.

Every cell is fine-tuned before measuring, mirroring how the end-to-end
pipeline treats its single operating point.  Budgets are explicit
arguments so callers can trade fidelity for runtime; cells are seeded and
rows come out in grid order, so a sweep is deterministic per seed set.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import container as ct
from . import stats
from .mnist import Dataset
from .nets import Network, evaluate
from .pipeline import StageTrainConfig
from .pruning import PruneConfig, encode_relative, prune_and_retrain
from .quantize import QuantConfig, finetune_quantized, quantize_layer


@dataclass
class SweepRow:
    kind: str
    setting: str
    bits: int | None
    density: float | None
    seed: int
    error: float
    rate: float | None


def _all_ones_masks(net: Network) -> list[np.ndarray]:
    return [np.ones_like(l.weights, dtype=np.float32) for l in net.layers]


def _quantize_cells(net: Network, masks, bits, init_method, seed, train, finetune_cfg):
    """Quantize a copy of the network in place and fine-tune; returns the copy."""
    work = net.copy()
    qcfg = QuantConfig(bits=bits, init_method=init_method, seed=seed)
    codebooks, assignments = [], []
    for layer, mask in zip(work.layers, masks):
        sparse = encode_relative(layer.weights, mask, 5)
        cb, asg = quantize_layer(sparse, qcfg)
        codebooks.append(cb)
        assignments.append(asg)
    ft = finetune_cfg.to_train_config()
    ft.seed = seed
    codebooks = finetune_quantized(
        work, codebooks, assignments, masks, train, ft, lr_schedule=finetune_cfg.schedule()
    )
    return work, codebooks, assignments


def _container_rate(net: Network, masks, codebooks, assignments, index_bits=5) -> float:
    dense = ct.build_dense_model(net)
    pruned = ct.build_pruned_model(net, masks, index_bits)
    quantized = ct.build_quantized_model(pruned, codebooks, assignments)
    return stats.file_compression_ratio(dense, quantized)


def _dense_quant_rate(net: Network, bits: int) -> float:
    """Analytic rate for quantizing without pruning: indices stored densely."""
    total = sum(l.weights.size for l in net.layers)
    k = 1 << bits
    compressed = sum(l.weights.size * bits + k * 32 for l in net.layers)
    return total * 32 / compressed


def bits_vs_accuracy(
    dense_net: Network,
    pruned_net: Network,
    masks: list[np.ndarray],
    train: Dataset,
    test: Dataset,
    finetune_cfg: StageTrainConfig,
    bits_grid=range(1, 9),
    seed: int = 0,
) -> list[SweepRow]:
    """Quantization bit sweep, with and without pruning, each cell fine-tuned."""
    rows = []
    ones = _all_ones_masks(dense_net)
    for bits in bits_grid:
        for setting, net, m in (("pruned", pruned_net, masks), ("dense", dense_net, ones)):
            work, codebooks, assignments = _quantize_cells(
                net, m, bits, "linear", seed, train, finetune_cfg
            )
            err = evaluate(work, test)
            if setting == "pruned":
                rate = _container_rate(net, m, codebooks, assignments)
            else:
                rate = _dense_quant_rate(net, bits)
            rows.append(SweepRow("bits_vs_accuracy", setting, bits, None, seed, err, rate))
    return rows


def rate_vs_accuracy(
    dense_net: Network,
    train: Dataset,
    test: Dataset,
    retrain_cfg: StageTrainConfig,
    finetune_cfg: StageTrainConfig,
    densities=(0.05, 0.08, 0.12, 0.2),
    bits_grid=(2, 3, 4, 5, 6, 8),
    combined_bits: int = 6,
    seed: int = 0,
) -> list[SweepRow]:
    """Accuracy against compression for pruning, quantization, and both."""
    rows = []

    pruned_cache = {}
    for d in densities:
        work = dense_net.copy()
        pcfg = PruneConfig([d] * len(work.layers), retrain_cfg.to_train_config())
        work, masks = prune_and_retrain(work, train, pcfg, lr_schedule=retrain_cfg.schedule())
        pruned_cache[d] = (work, masks)
        dense_m = ct.build_dense_model(work)
        pruned_m = ct.build_pruned_model(work, masks, 5)
        rate = stats.file_compression_ratio(dense_m, pruned_m)
        rows.append(
            SweepRow("rate_vs_accuracy", "prune_only", None, d, seed, evaluate(work, test), rate)
        )

    for bits in bits_grid:
        work, _, _ = _quantize_cells(
            dense_net, _all_ones_masks(dense_net), bits, "linear", seed, train, finetune_cfg
        )
        rows.append(
            SweepRow(
                "rate_vs_accuracy", "quantize_only", bits, None, seed,
                evaluate(work, test), _dense_quant_rate(dense_net, bits),
            )
        )

    for d in densities:
        base, masks = pruned_cache[d]
        work, codebooks, assignments = _quantize_cells(
            base, masks, combined_bits, "linear", seed, train, finetune_cfg
        )
        rate = _container_rate(work, masks, codebooks, assignments)
        rows.append(
            SweepRow(
                "rate_vs_accuracy", "combined", combined_bits, d, seed,
                evaluate(work, test), rate,
            )
        )
    return rows


def init_comparison(
    pruned_net: Network,
    masks: list[np.ndarray],
    train: Dataset,
    test: Dataset,
    finetune_cfg: StageTrainConfig,
    bits_grid=range(2, 9),
    methods=("forgy", "density", "linear"),
    seeds=(0,),
) -> list[SweepRow]:
    """Centroid-initialization comparison over a bits grid, fine-tuned cells."""
    rows = []
    for method in methods:
        for bits in bits_grid:
            for seed in seeds:
                work, codebooks, assignments = _quantize_cells(
                    pruned_net, masks, bits, method, seed, train, finetune_cfg
                )
                rate = _container_rate(work, masks, codebooks, assignments)
                rows.append(
                    SweepRow("init_comparison", method, bits, None, seed,
                             evaluate(work, test), rate)
                )
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "setting", "bits", "density", "seed", "error", "rate"])
        for r in rows:
            w.writerow([
                r.kind, r.setting,
                "" if r.bits is None else r.bits,
                "" if r.density is None else r.density,
                r.seed, f"{r.error:.6f}",
                "" if r.rate is None else f"{r.rate:.4f}",
            ])
