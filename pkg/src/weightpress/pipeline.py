"""End-to-end orchestration: train, prune, quantize, entropy-code, report.

Stage ordering is fixed (prune before quantize before huffman); each stage
writes its container next to the previous ones so a run can resume from any
completed stage.  All stochastic steps take their seeds from the config, so
re-running an identical config reproduces byte-identical artifacts.
"""

import configparser
import csv
import io
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import container as ct
from . import kernels, stats
from .errors import CorruptionError, FormatError
from .mnist import Dataset, load_mnist_idx
from .nets import Network, TrainConfig, evaluate, init_network, load_network, save_network, sgd_train
from .pruning import PruneConfig, density, prune_and_retrain
from .quantize import QuantConfig, finetune_quantized, quantize_layer
from .pruning import encode_relative

STAGE_ORDER = ("train", "prune", "quantize", "huffman")


@dataclass
class StageTrainConfig:
    """Training knobs for one stage, including a step learning-rate decay."""

    learning_rate: float
    epochs: int
    batch_size: int = 64
    weight_decay: float = 0.0
    lr_drop: float = 1.0
    lr_drop_every: int = 0
    seed: int = 0

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            weight_decay=self.weight_decay,
        )

    def schedule(self):
        if self.lr_drop_every <= 0 or self.lr_drop == 1.0:
            return None
        return lambda epoch: self.learning_rate * (self.lr_drop ** (epoch // self.lr_drop_every))


@dataclass
class PipelineConfig:
    train_images: str = "data/mnist/train-images-idx3-ubyte.gz"
    train_labels: str = "data/mnist/train-labels-idx1-ubyte.gz"
    test_images: str = "data/mnist/t10k-images-idx3-ubyte.gz"
    test_labels: str = "data/mnist/t10k-labels-idx1-ubyte.gz"
    train_subset: int = 0  # 0 = use everything

    dims: list[int] = field(default_factory=lambda: [784, 300, 100, 10])
    init_seed: int = 1

    train: StageTrainConfig = field(
        default_factory=lambda: StageTrainConfig(
            learning_rate=0.1, epochs=20, batch_size=64, weight_decay=5e-4,
            lr_drop=0.3, lr_drop_every=8, seed=2,
        )
    )
    prune_densities: list[float] = field(default_factory=lambda: [0.08, 0.09, 0.26])
    index_bits: int = 5
    retrain: StageTrainConfig = field(
        default_factory=lambda: StageTrainConfig(
            learning_rate=0.2, epochs=40, batch_size=64, weight_decay=0.0,
            lr_drop=0.3, lr_drop_every=16, seed=3,
        )
    )
    quant_bits: int = 6
    quant_init: str = "linear"
    quant_max_iters: int = 100
    quant_rel_tol: float = 1e-6
    quant_seed: int = 4
    finetune: StageTrainConfig = field(
        default_factory=lambda: StageTrainConfig(
            learning_rate=0.003, epochs=3, batch_size=64, seed=5,
        )
    )
    out_dir: str = "out"


def _stage_section(cfg: StageTrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def config_to_ini(cfg: PipelineConfig) -> str:
    cp = configparser.ConfigParser()
    cp["data"] = {
        "train_images": cfg.train_images,
        "train_labels": cfg.train_labels,
        "test_images": cfg.test_images,
        "test_labels": cfg.test_labels,
        "train_subset": cfg.train_subset,
    }
    cp["network"] = {"dims": ",".join(map(str, cfg.dims)), "seed": cfg.init_seed}
    cp["train"] = _stage_section(cfg.train)
    cp["prune"] = {
        "densities": ",".join(map(str, cfg.prune_densities)),
        "index_bits": cfg.index_bits,
        **_stage_section(cfg.retrain),
    }
    cp["quantize"] = {
        "bits": cfg.quant_bits,
        "init": cfg.quant_init,
        "max_iters": cfg.quant_max_iters,
        "rel_tol": cfg.quant_rel_tol,
        "seed": cfg.quant_seed,
    }
    cp["finetune"] = _stage_section(cfg.finetune)
    cp["output"] = {"dir": cfg.out_dir}
    for section in cp.values():
        for key in section:
            section[key] = str(section[key])
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _read_stage(section, defaults: StageTrainConfig) -> StageTrainConfig:
    return StageTrainConfig(
        learning_rate=section.getfloat("learning_rate", defaults.learning_rate),
        epochs=section.getint("epochs", defaults.epochs),
        batch_size=section.getint("batch_size", defaults.batch_size),
        weight_decay=section.getfloat("weight_decay", defaults.weight_decay),
        lr_drop=section.getfloat("lr_drop", defaults.lr_drop),
        lr_drop_every=section.getint("lr_drop_every", defaults.lr_drop_every),
        seed=section.getint("seed", defaults.seed),
    )


def load_config(path) -> PipelineConfig:
    cp = configparser.ConfigParser()
    with open(path) as f:
        cp.read_file(f)
    cfg = PipelineConfig()
    if cp.has_section("data"):
        d = cp["data"]
        cfg.train_images = d.get("train_images", cfg.train_images)
        cfg.train_labels = d.get("train_labels", cfg.train_labels)
        cfg.test_images = d.get("test_images", cfg.test_images)
        cfg.test_labels = d.get("test_labels", cfg.test_labels)
        cfg.train_subset = d.getint("train_subset", cfg.train_subset)
    if cp.has_section("network"):
        n = cp["network"]
        if "dims" in n:
            cfg.dims = [int(x) for x in n["dims"].split(",")]
        cfg.init_seed = n.getint("seed", cfg.init_seed)
    if cp.has_section("train"):
        cfg.train = _read_stage(cp["train"], cfg.train)
    if cp.has_section("prune"):
        p = cp["prune"]
        if "densities" in p:
            cfg.prune_densities = [float(x) for x in p["densities"].split(",")]
        cfg.index_bits = p.getint("index_bits", cfg.index_bits)
        cfg.retrain = _read_stage(p, cfg.retrain)
    if cp.has_section("quantize"):
        q = cp["quantize"]
        cfg.quant_bits = q.getint("bits", cfg.quant_bits)
        cfg.quant_init = q.get("init", cfg.quant_init)
        cfg.quant_max_iters = q.getint("max_iters", cfg.quant_max_iters)
        cfg.quant_rel_tol = q.getfloat("rel_tol", cfg.quant_rel_tol)
        cfg.quant_seed = q.getint("seed", cfg.quant_seed)
    if cp.has_section("finetune"):
        cfg.finetune = _read_stage(cp["finetune"], cfg.finetune)
    if cp.has_section("output"):
        cfg.out_dir = cp["output"].get("dir", cfg.out_dir)
    return cfg


@dataclass
class PipelineResult:
    stage_errors: dict  # stage name -> test error
    artifacts: dict  # name -> path
    report: stats.StatsReport | None = None
    masks: list | None = None
    network: Network | None = None
    codebooks: list | None = None
    assignments: list | None = None


def _load_data(cfg: PipelineConfig) -> tuple[Dataset, Dataset]:
    train = load_mnist_idx(cfg.train_images, cfg.train_labels)
    test = load_mnist_idx(cfg.test_images, cfg.test_labels)
    if cfg.train_subset:
        train = train.subset(cfg.train_subset, seed=cfg.init_seed)
    return train, test


def quantize_network(net: Network, masks, cfg: PipelineConfig, train: Dataset):
    """Per-layer codebooks via k-means, then centroid fine-tuning."""
    qcfg = QuantConfig(
        bits=cfg.quant_bits,
        init_method=cfg.quant_init,
        max_iters=cfg.quant_max_iters,
        rel_tol=cfg.quant_rel_tol,
        seed=cfg.quant_seed,
    )
    codebooks, assignments = [], []
    for layer, mask in zip(net.layers, masks):
        sparse = encode_relative(layer.weights, mask, cfg.index_bits)
        cb, asg = quantize_layer(sparse, qcfg)
        codebooks.append(cb)
        assignments.append(asg)
    codebooks = finetune_quantized(
        net, codebooks, assignments, masks, train,
        cfg.finetune.to_train_config(), lr_schedule=cfg.finetune.schedule(),
    )
    return codebooks, assignments


def run_pipeline(
    cfg: PipelineConfig, stages=STAGE_ORDER, log=print
) -> PipelineResult:
    """Run the requested stages in order, writing artifacts under out_dir."""
    bad = [s for s in stages if s not in STAGE_ORDER]
    if bad:
        raise ValueError(f"unknown stages {bad}")
    stages = [s for s in STAGE_ORDER if s in stages]
    os.makedirs(cfg.out_dir, exist_ok=True)
    train, test = _load_data(cfg)
    paths = {
        "dense_net": os.path.join(cfg.out_dir, "model.wpdn"),
        "dense": os.path.join(cfg.out_dir, "dense.wpcm"),
        "pruned": os.path.join(cfg.out_dir, "pruned.wpcm"),
        "quantized": os.path.join(cfg.out_dir, "quantized.wpcm"),
        "huffman": os.path.join(cfg.out_dir, "huffman.wpcm"),
        "stats": os.path.join(cfg.out_dir, "stats.csv"),
        "accuracy_log": os.path.join(cfg.out_dir, "accuracy_log.csv"),
    }
    errors = {}
    result = PipelineResult(errors, paths)

    t0 = time.time()
    if "train" in stages:
        net = init_network(cfg.dims, cfg.init_seed)
        sgd_train(net, train, cfg.train.to_train_config(), lr_schedule=cfg.train.schedule())
        save_network(paths["dense_net"], net)
    else:
        net = load_network(paths["dense_net"])
        log(f"loaded dense model from {paths['dense_net']}")
    dense_model = ct.build_dense_model(net)
    with open(paths["dense"], "wb") as f:
        f.write(ct.serialize(dense_model))
    errors["train"] = evaluate(net, test)
    log(f"[train] test error {errors['train'] * 100:.2f}%  ({time.time() - t0:.0f}s)")
    result.network = net

    masks = None
    if "prune" in stages:
        t0 = time.time()
        pcfg = PruneConfig(cfg.prune_densities, cfg.retrain.to_train_config())
        net, masks = prune_and_retrain(net, train, pcfg, lr_schedule=cfg.retrain.schedule())
        pruned_model = ct.build_pruned_model(net, masks, cfg.index_bits)
        with open(paths["pruned"], "wb") as f:
            f.write(ct.serialize(pruned_model))
        errors["prune"] = evaluate(net, test)
        dens = ", ".join(f"{density(m) * 100:.1f}%" for m in masks)
        log(f"[prune] test error {errors['prune'] * 100:.2f}%  densities {dens}  ({time.time() - t0:.0f}s)")
        result.masks = masks

    quantized_model = None
    if "quantize" in stages:
        if masks is None:
            raise ValueError("quantize stage needs the prune stage (or its masks)")
        t0 = time.time()
        codebooks, assignments = quantize_network(net, masks, cfg, train)
        pruned_model = ct.build_pruned_model(net, masks, cfg.index_bits)
        quantized_model = ct.build_quantized_model(pruned_model, codebooks, assignments)
        with open(paths["quantized"], "wb") as f:
            f.write(ct.serialize(quantized_model))
        errors["quantize"] = evaluate(net, test)
        log(f"[quantize] test error {errors['quantize'] * 100:.2f}%  "
            f"k={2 ** cfg.quant_bits} per layer  ({time.time() - t0:.0f}s)")
        result.codebooks = codebooks
        result.assignments = assignments

    if "huffman" in stages:
        if quantized_model is None:
            raise ValueError("huffman stage needs the quantize stage")
        t0 = time.time()
        huffman_model = ct.promote_to_huffman(quantized_model)
        with open(paths["huffman"], "wb") as f:
            f.write(ct.serialize(huffman_model))
        err, _ = kernels.evaluate_compressed(huffman_model, test)
        errors["huffman"] = err
        log(f"[huffman] test error {errors['huffman'] * 100:.2f}% via compressed kernels  "
            f"({time.time() - t0:.0f}s)")
        report = stats.compute_stats(huffman_model)
        stats.write_stats_csv(report, paths["stats"])
        result.report = report
        log(stats.format_stats(report))
        ratio = stats.file_compression_ratio(dense_model, huffman_model)
        log(f"container file: {report.file_bytes} bytes, {ratio:.1f}x smaller than dense")

    with open(paths["accuracy_log"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "test_error"])
        for stage in STAGE_ORDER:
            if stage in errors:
                w.writerow([stage, f"{errors[stage]:.6f}"])
    result.network = net
    return result


# ------------------------------------------------------------------ verify


@dataclass
class VerifyReport:
    checks: list  # (name, ok, detail)

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def __str__(self):
        lines = [
            f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}" for name, ok, detail in self.checks
        ]
        first_fail = next((n for n, ok, _ in self.checks if not ok), None)
        if first_fail:
            lines.append(f"first failure: {first_fail}")
        return "\n".join(lines)


def verify(path) -> VerifyReport:
    """Integrity checks on a container file; failures are report content."""
    checks = []
    with open(path, "rb") as f:
        raw = f.read()

    try:
        model = ct.deserialize(raw)
        checks.append(("deserialize", True, f"{len(model.layers)} layers"))
    except (FormatError, CorruptionError) as e:
        checks.append(("deserialize", False, str(e)))
        return VerifyReport(checks)

    again = ct.serialize(model)
    checks.append(
        ("round_trip", again == raw, "byte-identical re-serialization"
         if again == raw else f"{len(again)} vs {len(raw)} bytes differ")
    )

    try:
        dense = [ct.reconstruct_dense(rec) for rec in model.layers]
        checks.append(("reconstruct", True, "all layers reconstruct"))
    except (FormatError, CorruptionError, ValueError) as e:
        checks.append(("reconstruct", False, str(e)))
        return VerifyReport(checks)

    rng = np.random.default_rng(0)
    worst = 0.0
    for rec, w, bias in zip(model.layers, dense, model.biases):
        x = rng.random(rec.shape[1], dtype=np.float32)
        y_dense = kernels.gemv_dense(w, x, bias)
        paths_out = [y_dense]
        if rec.stream is not None:
            from .pruning import SparseLayer

            layer = SparseLayer(rec.shape, rec.stream, rec.nnz)
            paths_out.append(kernels.spmv_relative(layer, x, bias))
            if rec.indices is not None:
                paths_out.append(
                    kernels.spmv_quantized(layer, rec.indices, rec.codebook, x, bias)
                )
        scale = max(float(np.linalg.norm(y_dense)), 1e-12)
        for y in paths_out[1:]:
            worst = max(worst, float(np.linalg.norm(y - y_dense)) / scale)
    ok = worst <= 1e-5
    checks.append(("kernel_agreement", ok, f"worst relative deviation {worst:.2e}"))

    try:
        report = stats.compute_stats(model)
    except AssertionError as e:
        checks.append(("accounting", False, str(e)))
        return VerifyReport(checks)
    mismatch = None
    for rec, row in zip(model.layers, report.rows):
        actual = 8 * sum(len(p) for p in ct._layer_payloads(rec))
        expect = {
            ct.STAGE_QUANTIZED: row.pq_bits,
            ct.STAGE_HUFFMAN: row.pqh_bits,
        }.get(rec.stage)
        if expect is not None and expect != actual:
            mismatch = f"layer {rec.name}: stats say {expect} bits, payloads are {actual}"
            break
    checks.append(
        ("accounting", mismatch is None,
         mismatch or f"stage payload sizes match the report; file {report.file_bytes} bytes")
    )

    return VerifyReport(checks)
