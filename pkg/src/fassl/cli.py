"""Command-line entry point: ``fassl <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .data import AugmentConfig, DatasetSpec, load_dataset, save_dataset, synth_gaussian_mixture
from .encoder import load_checkpoint, save_checkpoint
from .evaluation import evaluate_probe, extract_features, prototype_class_distribution
from .pipeline import (EncoderDims, RunConfig, apply_overrides, load_config, run_pipeline, sweep,
                       write_json)
from .prototypes import PrototypeBank, ProtoStageConfig, train_prototype_stage
from .rebalance import RebalanceConfig, train_rebalance_stage


def _metrics_path(explicit, anchor) -> Path:
    return Path(explicit) if explicit else Path(str(anchor) + ".metrics.json")


def cmd_synth_data(args) -> int:
    spec = DatasetSpec(args.classes, args.max_count, args.rho, args.dim, args.sep, args.noise, args.seed)
    result = synth_gaussian_mixture(spec, test_per_class=args.test_per_class)
    train, test = result if args.test_per_class > 0 else (result, None)
    save_dataset(train, args.out)
    if test is not None:
        save_dataset(test, args.test_out or str(args.out) + ".test")
    print(f"wrote {train.num_samples} samples, counts {train.per_class_counts.tolist()} -> {args.out}")
    return 0


def cmd_pretrain_proto(args) -> int:
    ds = load_dataset(args.data)
    cfg = ProtoStageConfig(num_prototypes=args.k, beta=args.beta, batch_size=args.batch, epochs=args.epochs,
                           lr=args.lr, seed=args.seed, init_mode="checkpoint" if args.init else "random")
    enc_cfg = EncoderDims(feature_dim=args.feature_dim).config(ds.samples.shape[1])
    init = load_checkpoint(args.init) if args.init else None
    t0 = time.perf_counter()
    teacher, bank, metrics = train_prototype_stage(ds.unlabeled(), cfg, init, enc_cfg=enc_cfg,
                                                   augment=AugmentConfig())
    metrics.update(wall_time=time.perf_counter() - t0, seed=args.seed, config=asdict(cfg))
    save_checkpoint(teacher, args.out_teacher)
    save_checkpoint(bank.to_params(), args.out_protos)
    write_json(metrics, _metrics_path(args.metrics, args.out_teacher))
    print(f"stage 1 loss {metrics['loss'][0] if metrics['loss'] else float('nan'):.4f} -> "
          f"{metrics['loss'][-1] if metrics['loss'] else float('nan'):.4f}")
    return 0


def cmd_pretrain_rebalance(args) -> int:
    ds = load_dataset(args.data)
    cfg = RebalanceConfig(tau=args.tau, lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                          clip_quantile=args.clip_q, uniform_weights=args.uniform_weights)
    teacher = load_checkpoint(args.teacher)
    bank = PrototypeBank.from_params(load_checkpoint(args.protos))
    t0 = time.perf_counter()
    student, teacher, metrics = train_rebalance_stage(ds.unlabeled(), cfg, teacher, bank, augment=AugmentConfig())
    metrics.update(wall_time=time.perf_counter() - t0, seed=args.seed, config=asdict(cfg))
    save_checkpoint(student, args.out_student)
    save_checkpoint(teacher, args.out_teacher)
    write_json(metrics, _metrics_path(args.metrics, args.out_student))
    print(f"stage 2 loss {metrics['loss'][0] if metrics['loss'] else float('nan'):.4f} -> "
          f"{metrics['loss'][-1] if metrics['loss'] else float('nan'):.4f}")
    return 0


def cmd_eval_linear(args) -> int:
    train = load_dataset(args.data)
    test = load_dataset(args.test_data) if args.test_data else train
    params = load_checkpoint(args.features_from)
    epochs = args.epochs or (30 if args.fraction >= 1 else 100)
    gm = evaluate_probe(params, train, test, fraction=args.fraction, epochs=epochs, lr=args.lr, seed=args.seed)
    out = gm.as_dict()
    out.update(seed=args.seed, config={"fraction": args.fraction, "epochs": epochs, "lr": args.lr,
                                       "features_from": str(args.features_from), "data": str(args.data),
                                       "test_data": str(args.test_data or args.data)})
    write_json(out, args.out)
    print(" ".join(f"{k}={v:.2f}" for k, v in gm.as_dict().items()))
    return 0


def cmd_analyze_prototypes(args) -> int:
    ds = load_dataset(args.data)
    bank = PrototypeBank.from_params(load_checkpoint(args.protos))
    feats = extract_features(load_checkpoint(args.teacher), ds.samples)
    dist = prototype_class_distribution(bank, feats, ds.labels, ds.group_of_class)
    write_json(dist.as_dict(), args.out)
    print(" ".join(f"{g}={p:.2f}%" for g, p in dist.group_percent.items()))
    return 0


def _pipeline_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out:
        overrides["out"] = args.out
    if getattr(args, "ablation", None) == "uniform-weights":
        overrides["rebalance.uniform_weights"] = "true"
    return apply_overrides(cfg, overrides)


def cmd_run_pipeline(args) -> int:
    cfg = _pipeline_config(args)
    m = run_pipeline(cfg)
    print(f"acc_all={m['acc_all']:.2f} rare={m['acc_rare']:.2f} std={m['std_groups']:.2f} -> {cfg.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _pipeline_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    values = [v.strip() for v in args.values.split(",")]
    table = sweep(cfg, args.axis, values, seeds=seeds, out=cfg.out)
    cols = ["acc_all", "acc_rare", "std_groups", "proto_frequent"]
    print(args.axis.ljust(10) + "".join(c.rjust(16) for c in cols))
    for row in table:
        print(str(row[args.axis]).ljust(10) + "".join(f"{row[c]:16.2f}" for c in cols))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fassl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate a long-tailed Gaussian mixture dataset")
    s.add_argument("--classes", type=int, default=9)
    s.add_argument("--max-count", type=int, default=200)
    s.add_argument("--rho", type=float, default=100.0)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--sep", type=float, default=4.0)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-per-class", type=int, default=0,
                   help="also write a balanced test split with this many samples per class")
    s.add_argument("--test-out", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("pretrain-proto", help="stage 1: prototypes + teacher")
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, default=128)
    s.add_argument("--beta", type=float, default=0.2)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--feature-dim", type=int, default=32)
    s.add_argument("--init", default=None, help="teacher checkpoint to start from")
    s.add_argument("--out-teacher", required=True)
    s.add_argument("--out-protos", required=True)
    s.add_argument("--metrics", default=None)
    s.set_defaults(func=cmd_pretrain_proto)

    s = sub.add_parser("pretrain-rebalance", help="stage 2: re-balanced teacher-student training")
    s.add_argument("--data", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--protos", required=True)
    s.add_argument("--tau", type=float, default=0.99)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clip-q", type=float, default=0.95)
    s.add_argument("--uniform-weights", action="store_true")
    s.add_argument("--out-student", required=True)
    s.add_argument("--out-teacher", required=True)
    s.add_argument("--metrics", default=None)
    s.set_defaults(func=cmd_pretrain_rebalance)

    s = sub.add_parser("eval-linear", help="linear probe on frozen encoder features")
    s.add_argument("--features-from", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--test-data", default=None)
    s.add_argument("--fraction", type=float, default=1.0)
    s.add_argument("--epochs", type=int, default=0)
    s.add_argument("--lr", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval_linear)

    s = sub.add_parser("analyze-prototypes", help="class distribution of prototypes")
    s.add_argument("--protos", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze_prototypes)

    for name, func in (("run-pipeline", cmd_run_pipeline), ("sweep", cmd_sweep)):
        s = sub.add_parser(name)
        s.add_argument("--config", default=None, help="key = value config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None)
        s.add_argument("--ablation", choices=["none", "uniform-weights"], default=None)
        if name == "sweep":
            s.add_argument("--axis", required=True, choices=["K", "tau", "rho", "fraction"])
            s.add_argument("--values", required=True, help="comma-separated")
            s.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
