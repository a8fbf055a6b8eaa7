"""Command line front end.

Subcommands mirror the pipeline stages: ``fetch`` and ``partition`` prepare
data, ``train-clients`` produces a bundle of local models, ``fedavg`` /
``distill`` / ``run`` build global models, and ``matrix`` / ``report``
drive experiment grids.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import viz
from .config import PRESETS, load_config, load_matrix_spec
from .data import DATASETS, load_dataset
from .determinism import enable_determinism
from .distillation import run_fedsyn, run_multiround, write_metrics_jsonl
from .ensemble import (
    ensemble_accuracy,
    evaluate,
    fedavg_aggregate,
    load_bundle,
    save_bundle,
)
from .fetch import fetch_dataset
from .harness import render_report, run_matrix
from .local_training import LocalTrainConfig, train_all_clients
from .models import generate, load_checkpoint, save_checkpoint
from .partition import dirichlet_partition, load_plan, partition_summary, save_plan

import torch


def _add_data_dir(p: argparse.ArgumentParser):
    p.add_argument("--data-dir", default=None, help="dataset cache dir (default: FEDSYN_DATA_DIR or ~/.cache/fedsyn)")


def _cmd_fetch(args) -> int:
    names = list(DATASETS) if args.dataset == "all" else [args.dataset]
    for name in names:
        dest = fetch_dataset(name, args.data_dir)
        print(f"{name}: cached under {dest}")
    return 0


def _cmd_partition(args) -> int:
    data = load_dataset(args.dataset, "train", root=args.data_dir)
    plan = dirichlet_partition(data, args.alpha, args.clients, args.seed)
    save_plan(plan, args.out)
    hist = partition_summary(plan, data)
    print(f"wrote {args.out}: m={plan.num_clients}, sizes={plan.client_sizes}")
    for k, row in enumerate(hist):
        print(f"  client {k}: {row.tolist()}")
    return 0


def _local_cfg_from_args(args) -> LocalTrainConfig:
    return LocalTrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        loss_id=args.loss,
        seed=args.seed,
    )


def _cmd_train_clients(args) -> int:
    data = load_dataset(args.dataset, "train", root=args.data_dir)
    plan = load_plan(args.plan)
    archs = args.archs.split(",")
    if len(archs) == 1:
        archs = archs * plan.num_clients
    bundle = train_all_clients(
        plan, data, archs, _local_cfg_from_args(args),
        width_scale=args.width_scale, workers=args.workers,
    )
    save_bundle(bundle, args.out)
    print(f"wrote bundle of {len(bundle)} clients to {args.out}")
    if args.eval:
        test = load_dataset(args.dataset, "test", root=args.data_dir)
        for k, client in enumerate(bundle.clients):
            print(f"  client {k} ({client.arch_id}): acc={evaluate(client, test):.4f}")
    return 0


def _cmd_fedavg(args) -> int:
    bundle = load_bundle(args.bundle)
    model = fedavg_aggregate(bundle)
    save_checkpoint(model, args.out)
    print(f"wrote aggregated checkpoint to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    test = load_dataset(args.dataset, args.split, root=args.data_dir)
    acc = evaluate(model, test)
    print(json.dumps({
        "model": str(args.model),
        "arch": model.arch_id,
        "dataset": test.name,
        "split": args.split,
        "examples": len(test),
        "accuracy": acc,
    }))
    return 0


def _run_and_save(bundle, student_arch, cfg, test, out_dir, dump_every):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    dump_cb = None
    if dump_every:
        probe_rng = torch.Generator().manual_seed(cfg.seed + 7)

        def dump_cb(rec, state):
            if rec["epoch"] % dump_every == 0:
                z = torch.randn(16, cfg.noise_dim, generator=probe_rng)
                viz.save_image_grid(
                    generate(state.gen, z),
                    out / f"synthetic_epoch{rec['epoch']:04d}.png",
                )

    result = run_fedsyn(bundle, student_arch, cfg, test=test, on_epoch=dump_cb)
    save_checkpoint(result.model, out / "global.ckpt")
    write_metrics_jsonl(result.trace, out / "metrics.jsonl")
    (out / "wall_clock.json").write_text(json.dumps(result.wall_clock, indent=2))
    acc = result.final_accuracy()
    print(f"final accuracy: {acc if acc is None else f'{acc:.4f}'}")
    print(f"artifacts in {out}")
    return result


def _cmd_distill(args) -> int:
    bundle = load_bundle(args.bundle)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.deterministic:
        enable_determinism()
    test = None
    if not args.no_eval:
        test = load_dataset(bundle.dataset, "test", root=args.data_dir)
    _run_and_save(bundle, args.student, cfg, test, args.out, args.dump_images_every)
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, local=replace(cfg.local, seed=args.seed))
    if args.rounds is not None:
        cfg = replace(cfg, rounds=args.rounds)
    if args.deterministic:
        enable_determinism()
    data = load_dataset(args.dataset, "train", root=args.data_dir)
    test = None if args.no_eval else load_dataset(args.dataset, "test", root=args.data_dir)
    archs = args.archs.split(",")
    if len(archs) == 1:
        archs = archs * args.clients
    plan = dirichlet_partition(data, args.alpha, args.clients, cfg.seed)
    student = args.student or archs[0]
    result = run_multiround(
        data, plan, archs, cfg, student_arch=student, test=test, workers=args.workers
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "global.ckpt")
    write_metrics_jsonl(result.trace, out / "metrics.jsonl")
    (out / "wall_clock.json").write_text(json.dumps(result.wall_clock, indent=2))
    acc = result.final_accuracy()
    print(f"final accuracy: {acc if acc is None else f'{acc:.4f}'}")
    print(f"artifacts in {out}")
    return 0


def _cmd_matrix(args) -> int:
    spec = load_matrix_spec(args.spec)
    if args.deterministic:
        enable_determinism()
    rows = run_matrix(spec, args.store, force=args.force,
                      data_root=args.data_dir, workers=args.workers)
    for row in rows:
        std = "" if row.std_acc is None else f" ±{row.std_acc * 100:.2f}"
        print(f"{row.dataset} α={row.alpha} m={row.m} {row.method}: "
              f"{row.mean_acc * 100:.2f}{std} (n={row.repeats})")
    return 0


def _cmd_report(args) -> int:
    written = render_report(args.store, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_ensemble_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    test = load_dataset(bundle.dataset, "test", root=args.data_dir)
    print(json.dumps({
        "bundle": str(args.bundle),
        "clients": [evaluate(c, test) for c in bundle.clients],
        "ensemble": ensemble_accuracy(bundle, test),
    }))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsyn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="materialize dataset caches")
    p.add_argument("--dataset", default="all", help="dataset name or 'all'")
    _add_data_dir(p)
    p.set_defaults(func=_cmd_fetch)

    p = sub.add_parser("partition", help="Dirichlet non-iid partition")
    p.add_argument("--dataset", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_data_dir(p)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("train-clients", help="local training per client")
    p.add_argument("--plan", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--archs", required=True, help="comma list, or one id for all")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--loss", default="cross_entropy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width-scale", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--eval", action="store_true", help="report client accuracies")
    p.add_argument("--out", required=True)
    _add_data_dir(p)
    p.set_defaults(func=_cmd_train_clients)

    p = sub.add_parser("fedavg", help="size-weighted parameter averaging")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fedavg)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    _add_data_dir(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ensemble-eval", help="client and average-logit accuracies")
    p.add_argument("--bundle", required=True)
    _add_data_dir(p)
    p.set_defaults(func=_cmd_ensemble_eval)

    p = sub.add_parser("distill", help="two-stage global training from a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--config", required=True, help="preset name or TOML path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-eval", action="store_true")
    p.add_argument("--dump-images-every", type=int, default=0,
                   help="save a synthetic-image grid every N epochs")
    p.add_argument("--deterministic", action="store_true")
    _add_data_dir(p)
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("run", help="end to end: partition, train, distill")
    p.add_argument("--dataset", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--archs", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--student", default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--no-eval", action="store_true")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", required=True)
    _add_data_dir(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("matrix", help="run an experiment grid")
    p.add_argument("--spec", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    _add_data_dir(p)
    p.set_defaults(func=_cmd_matrix)

    p = sub.add_parser("report", help="tables and plots from a results store")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
