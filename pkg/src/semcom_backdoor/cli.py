"""Command-line interface for the attack/defense experiment harness.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import os
import sys

import torch
import yaml

from .model import (
    ChannelSpec,
    DegenerateLatentError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .data import IngestionError, ingest_dataset, default_target
from .attack import make_patch_trigger, evaluate_attack
from .pruning import InfeasibleRatioError, NoSignalError, prune_defense
from .trigger_inversion import (
    InsufficientDataError,
    OptimizationFailureError,
    estimate_trigger,
    verify_trigger,
)
from .split_training import SplitConfig, SplitConfigError, receiver_view_audit, ushape_train
from .experiments import (
    ConfigError,
    ExperimentConfig,
    IncompleteDataError,
    read_records,
    replay_experiment,
    run_attack_experiment,
    run_defense_experiment,
)
from . import figures

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CONFIG_ERRORS = (ConfigError, SplitConfigError, ValueError, TypeError, KeyError)
DATA_ERRORS = (IngestionError, FileNotFoundError, IncompleteDataError)
NUMERIC_ERRORS = (OptimizationFailureError, NoSignalError, DegenerateLatentError,
                  InfeasibleRatioError, InsufficientDataError)


def load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as f:
            raw = yaml.safe_load(f) or {}
    if getattr(args, "dataset", None):
        raw["dataset"] = args.dataset
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
        if "train" in raw:
            raw["train"]["seed"] = args.seed
    if getattr(args, "out", None):
        raw["output_dir"] = args.out
    return ExperimentConfig.from_json_dict(raw)


def cmd_ingest(args):
    cfg = load_config(args)
    d_t, d_r = ingest_dataset(cfg.dataset, cfg.subset_size, cfg.seed, cfg.data_dir)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, f"{cfg.dataset}_subset.pt")
    torch.save({"symbols": d_t.symbols, "labels": d_t.labels}, path)
    print(f"ingested {len(d_t)} symbols of shape {d_t.symbol_shape} -> {path}")


def cmd_train(args):
    cfg = load_config(args)
    d_t, d_r = ingest_dataset(cfg.dataset, cfg.subset_size, cfg.seed, cfg.data_dir)
    model, losses = train(d_t, d_r, cfg.train)
    out = os.path.join(cfg.output_dir, "clean_model")
    save_checkpoint(model, out, seed=cfg.seed, epochs=cfg.train.epochs,
                    dataset_id=cfg.dataset)
    print(f"trained {cfg.train.epochs} epochs, final loss {losses[-1]:.6f} -> {out}")


def cmd_attack(args):
    cfg = load_config(args)
    records, _, _ = run_attack_experiment(cfg)
    psnrc = [r.value for r in records if r.metric == "PSNRC" and r.poison_ratio > 0]
    psnrp = [r.value for r in records if r.metric == "PSNRP" and r.poison_ratio > 0]
    print(f"backdoored model: mean PSNRC {sum(psnrc)/len(psnrc):.2f} dB, "
          f"mean PSNRP {sum(psnrp)/len(psnrp):.2f} dB")
    print(f"records -> {os.path.join(cfg.output_dir, 'attack_records.csv')}")


def cmd_defend(args):
    cfg = load_config(args)
    records, report, est = run_defense_experiment(cfg)
    by = {r.metric: r.value for r in records}
    if args.defense == "prune":
        print(f"pr* = {by['pr_star']:g}  clean drop {by['clean_drop_pct']:.2f}%  "
              f"attack drop {by['attack_drop_db']:.2f} dB  "
              f"recovery {by['recovery_db']:.2f} dB  F1 {by['F1']:.3f}")
    else:
        print(f"verify score {by['verify_score']:.2f} dB, "
              f"mask norm {est.final_mask_norm:.1f}")
    print(f"records -> {os.path.join(cfg.output_dir, 'defense_records.csv')}")


def cmd_split_train(args):
    cfg = load_config(args)
    d_t, d_r = ingest_dataset(cfg.dataset, cfg.subset_size, cfg.seed, cfg.data_dir)
    split = SplitConfig(args.k, args.m, cfg.train)
    model, losses, log = ushape_train(d_t, d_r, split)
    os.makedirs(cfg.output_dir, exist_ok=True)
    out = os.path.join(cfg.output_dir, "split_model")
    save_checkpoint(model, out, seed=cfg.seed, epochs=cfg.train.epochs,
                    dataset_id=cfg.dataset)
    log_path = os.path.join(cfg.output_dir, "exchange_log.csv")
    log.export_csv(log_path)
    audit = receiver_view_audit(log)
    print(f"final loss {losses[-1]:.6f}; audit clean={audit['clean']} -> {out}")
    print(f"exchange log -> {log_path}")


def cmd_evaluate(args):
    cfg = load_config(args)
    model = load_checkpoint(args.model)
    eval_set, _ = ingest_dataset(cfg.dataset, cfg.eval_size, cfg.seed + 90_001,
                                 cfg.data_dir)
    trig = make_patch_trigger(eval_set.symbol_shape, cfg.patch_size, cfg.patch_size,
                              cfg.patch_position, cfg.patch_color)
    target = default_target(eval_set, cfg.target_label)
    for snr in cfg.snr_sweep:
        ch = ChannelSpec("awgn", snr)
        gen = torch.Generator().manual_seed(cfg.seed * 13 + int(snr * 10))
        psnrc, psnrp = evaluate_attack(model, eval_set, trig, target, ch, gen)
        print(f"snr {snr:5.1f} dB: PSNRC {psnrc:6.2f} dB  PSNRP {psnrp:6.2f} dB")


def cmd_plot(args):
    cfg = load_config(args)
    records = read_records(args.records)
    png, csv_twin = figures.emit_figures(records, args.kind, cfg.output_dir)
    print(f"figure -> {png}\nseries -> {csv_twin}")


def cmd_replay(args):
    match, original = replay_experiment(args.manifest)
    if not match:
        print(f"replay MISMATCH against {original}", file=sys.stderr)
        sys.exit(EXIT_NUMERIC)
    print(f"replay matched {original} byte for byte")


def build_parser():
    p = argparse.ArgumentParser(prog="semcom-backdoor",
                                description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override experiment seed")
    p.add_argument("--out", help="override output directory")
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"],
                   help="override dataset")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", help="load a dataset subset and persist it").set_defaults(fn=cmd_ingest)
    sub.add_parser("train", help="train a clean model").set_defaults(fn=cmd_train)
    sub.add_parser("attack", help="run the backdoor attack experiment").set_defaults(fn=cmd_attack)

    defend = sub.add_parser("defend", help="run a defense")
    defend.add_argument("defense", choices=["prune", "reveng"])
    defend.set_defaults(fn=cmd_defend)

    st = sub.add_parser("split-train", help="train with the U-shape split protocol")
    st.add_argument("--k", type=int, default=5, help="last transmitter layer (downward)")
    st.add_argument("--m", type=int, default=2, help="receiver layer count")
    st.set_defaults(fn=cmd_split_train)

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint over the SNR sweep")
    ev.add_argument("--model", required=True, help="checkpoint directory")
    ev.set_defaults(fn=cmd_evaluate)

    pl = sub.add_parser("plot", help="render a figure with its CSV twin")
    pl.add_argument("--records", required=True, help="ResultRecord CSV path")
    pl.add_argument("--kind", required=True, choices=list(figures.FIGURE_KINDS))
    pl.set_defaults(fn=cmd_plot)

    rp = sub.add_parser("replay", help="re-run an experiment and verify byte identity")
    rp.add_argument("--manifest", required=True, help="manifest.json of the original run")
    rp.set_defaults(fn=cmd_replay)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except NUMERIC_ERRORS as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        sys.exit(EXIT_NUMERIC)
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        sys.exit(EXIT_DATA)
    except CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
