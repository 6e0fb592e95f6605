"""Command-line front end.

Subcommands mirror the pipeline stages plus reporting and verification:
train, prune, quantize, huffman, stats, eval, bench, sweep, verify,
pipeline.  Exit codes: 0 success, 2 verification failure, 1 error.
"""

import argparse
import sys

import numpy as np

from . import container as ct
from . import kernels, pipeline, stats, sweeps
from .mnist import load_mnist_idx
from .nets import evaluate, load_network


def _load_cfg(args) -> pipeline.PipelineConfig:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        # one global seed fans out to the per-stage seeds
        cfg.init_seed = args.seed
        cfg.train.seed = args.seed + 1
        cfg.retrain.seed = args.seed + 2
        cfg.quant_seed = args.seed + 3
        cfg.finetune.seed = args.seed + 4
    return cfg


def _resume_pruned(cfg):
    import os

    path = os.path.join(cfg.out_dir, "pruned.wpcm")
    with open(path, "rb") as f:
        model = ct.deserialize(f.read())
    net = ct.model_to_network(model)
    masks = [(rec_w != 0).astype(np.float32) for rec_w in (l.weights for l in net.layers)]
    return net, masks


def cmd_pipeline(args, cfg):
    stages = tuple(args.stages.split(",")) if args.stages else pipeline.STAGE_ORDER
    pipeline.run_pipeline(cfg, stages=stages)
    return 0


def cmd_stage(stage):
    def run(args, cfg):
        if stage in ("quantize", "huffman") or stage == "prune":
            # later stages resume from the artifacts of earlier ones
            stages = [s for s in pipeline.STAGE_ORDER if s == stage]
            if stage == "prune":
                stages = ["prune"]
                pipeline.run_pipeline(cfg, stages=stages)
                return 0
            net, masks = _resume_pruned(cfg)
            train, test = pipeline._load_data(cfg)
            import os

            if stage == "quantize":
                codebooks, assignments = pipeline.quantize_network(net, masks, cfg, train)
                pruned_model = ct.build_pruned_model(net, masks, cfg.index_bits)
                model = ct.build_quantized_model(pruned_model, codebooks, assignments)
                out = os.path.join(cfg.out_dir, "quantized.wpcm")
            else:
                with open(os.path.join(cfg.out_dir, "quantized.wpcm"), "rb") as f:
                    model = ct.promote_to_huffman(ct.deserialize(f.read()))
                out = os.path.join(cfg.out_dir, "huffman.wpcm")
            with open(out, "wb") as f:
                f.write(ct.serialize(model))
            err, _ = kernels.evaluate_compressed(model, test)
            print(f"[{stage}] wrote {out}, test error {err * 100:.2f}%")
            return 0
        pipeline.run_pipeline(cfg, stages=(stage,))
        return 0

    return run


def cmd_stats(args, cfg):
    with open(args.container, "rb") as f:
        model = ct.deserialize(f.read())
    report = stats.compute_stats(model)
    print(stats.format_stats(report))
    if args.csv:
        stats.write_stats_csv(report, args.csv)
        print(f"wrote {args.csv}")
    return 0


def cmd_eval(args, cfg):
    test = load_mnist_idx(cfg.test_images, cfg.test_labels)
    if args.model.endswith(".wpdn"):
        net = load_network(args.model)
        err = evaluate(net, test)
        print(f"{args.model}: test error {err * 100:.2f}% (dense network)")
        return 0
    with open(args.model, "rb") as f:
        model = ct.deserialize(f.read())
    err, _ = kernels.evaluate_compressed(model, test)
    print(f"{args.model}: test error {err * 100:.2f}% via compressed kernels")
    return 0


def cmd_bench(args, cfg):
    with open(args.container, "rb") as f:
        model = ct.deserialize(f.read())
    rows = kernels.benchmark(
        model, batch_sizes=tuple(int(b) for b in args.batches.split(",")),
        repetitions=args.reps,
    )
    for r in rows:
        print(f"{r.layer:8s} {r.representation:10s} batch={r.batch:<4d} "
              f"{r.median_us:10.1f} us  checksum {r.checksum:.6e}")
    if args.csv:
        kernels.write_benchmark_csv(rows, args.csv)
        print(f"wrote {args.csv}")
    return 0


def cmd_sweep(args, cfg):
    import os

    train, test = pipeline._load_data(cfg)
    if args.train_subset:
        train = train.subset(args.train_subset, seed=cfg.init_seed)
    finetune = pipeline.StageTrainConfig(
        learning_rate=cfg.finetune.learning_rate, epochs=args.finetune_epochs,
        batch_size=cfg.finetune.batch_size, seed=cfg.finetune.seed,
    )
    dense_net = load_network(os.path.join(cfg.out_dir, "model.wpdn"))

    if args.kind == "rate_vs_accuracy":
        retrain = pipeline.StageTrainConfig(
            learning_rate=cfg.retrain.learning_rate, epochs=args.retrain_epochs,
            batch_size=cfg.retrain.batch_size, seed=cfg.retrain.seed,
            lr_drop=0.3, lr_drop_every=max(1, args.retrain_epochs // 2),
        )
        rows = sweeps.rate_vs_accuracy(dense_net, train, test, retrain, finetune)
    else:
        pruned_net, masks = _resume_pruned(cfg)
        if args.kind == "bits_vs_accuracy":
            rows = sweeps.bits_vs_accuracy(dense_net, pruned_net, masks, train, test, finetune)
        else:
            seeds = tuple(int(s) for s in args.seeds.split(","))
            rows = sweeps.init_comparison(
                pruned_net, masks, train, test, finetune, seeds=seeds
            )
    path = args.csv or os.path.join(cfg.out_dir, f"sweep_{args.kind}.csv")
    sweeps.write_sweep_csv(rows, path)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_verify(args, cfg):
    report = pipeline.verify(args.container)
    print(report)
    return 0 if report.ok else 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="weightpress",
        description="Compress fully connected networks by pruning, weight "
        "sharing and entropy coding, then run them compressed.",
    )
    parser.add_argument("--config", help="INI config file (defaults are built in)")
    parser.add_argument("--seed", type=int, help="override all stage seeds from one value")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument(
        "--print-config", action="store_true", help="print the effective config and exit"
    )
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("train", help="train the dense baseline")
    sub.add_parser("prune", help="magnitude-prune and retrain (needs model.wpdn)")
    sub.add_parser("quantize", help="cluster weights and fine-tune (needs pruned.wpcm)")
    sub.add_parser("huffman", help="entropy-code the quantized container")

    p = sub.add_parser("pipeline", help="run stages end to end")
    p.add_argument("--stages", help="comma list from train,prune,quantize,huffman")

    p = sub.add_parser("stats", help="per-layer compression statistics")
    p.add_argument("container")
    p.add_argument("--csv")

    p = sub.add_parser("eval", help="test error of a model file")
    p.add_argument("model", help=".wpdn dense model or .wpcm container")

    p = sub.add_parser("bench", help="kernel timing report")
    p.add_argument("container")
    p.add_argument("--batches", default="1,64")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--csv")

    p = sub.add_parser("sweep", help="analysis sweeps")
    p.add_argument("--kind", required=True,
                   choices=["bits_vs_accuracy", "rate_vs_accuracy", "init_comparison"])
    p.add_argument("--retrain-epochs", type=int, default=6)
    p.add_argument("--finetune-epochs", type=int, default=1)
    p.add_argument("--train-subset", type=int, default=0)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--csv")

    p = sub.add_parser("verify", help="integrity checks on a container")
    p.add_argument("container")

    args = parser.parse_args(argv)
    cfg = _load_cfg(args)
    if args.print_config:
        print(pipeline.config_to_ini(cfg), end="")
        return 0
    if not args.command:
        parser.print_help()
        return 1

    handlers = {
        "train": cmd_stage("train"),
        "prune": cmd_stage("prune"),
        "quantize": cmd_stage("quantize"),
        "huffman": cmd_stage("huffman"),
        "pipeline": cmd_pipeline,
        "stats": cmd_stats,
        "eval": cmd_eval,
        "bench": cmd_bench,
        "sweep": cmd_sweep,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args, cfg)
    except Exception as e:  # surfaced with stage context by the modules
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
