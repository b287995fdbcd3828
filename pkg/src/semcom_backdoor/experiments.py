"""Experiment orchestration: attack/defense pipelines, metrics, persistence.

Every experiment is fully determined by (config, seed): records are written
as append-only CSV plus a JSON manifest, and replaying the same config must
reproduce the CSV byte for byte.
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import torch

from .model import (
    ChannelSpec,
    LabeledDataset,
    TrainConfig,
    channel_transmit,
    psnr,
    save_checkpoint,
    train,
)
from .data import ingest_dataset, default_target
from .attack import (
    PoisonPlan,
    TriggerSpec,
    apply_trigger,
    evaluate_attack,
    make_patch_trigger,
    poison_datasets,
)
from .pruning import PruneSweepConfig, prune_defense
from .trigger_inversion import RevEngConfig, estimate_trigger, verify_trigger


class ConfigError(ValueError):
    pass


class IncompleteDataError(ValueError):
    pass


RECORD_FIELDS = ["experiment_id", "metric", "value", "poison_ratio", "snr_db", "cr", "seed"]
METRICS = {
    "PSNRC", "PSNRP", "F1", "pr_star", "clean_drop_pct", "poison_recovery_pct",
    "attack_drop_db", "recovery_db", "verify_score",
}


@dataclass(frozen=True)
class ResultRecord:
    experiment_id: str
    metric: str
    value: float
    poison_ratio: float
    snr_db: float
    cr: float
    seed: int

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not torch.isfinite(torch.tensor(self.value)):
            raise ValueError(f"non-finite value for {self.metric}")


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    subset_size: int = 3000
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=120))
    poison_ratio: float = 0.1
    target_label: int = 5
    patch_size: int = 4
    patch_position: tuple = (0, 0)
    patch_color: float = 1.0
    snr_sweep: tuple = (1.0, 5.0, 9.0, 13.0)
    defense: PruneSweepConfig = field(default_factory=PruneSweepConfig)
    reveng: RevEngConfig = field(default_factory=RevEngConfig)
    output_dir: str = "results"
    seed: int = 0
    eval_size: int = 120
    data_dir: Optional[str] = None

    def __post_init__(self):
        if self.dataset not in ("mnist", "cifar10", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.subset_size < 1:
            raise ConfigError("subset_size must be >= 1")
        if not (0.0 <= self.poison_ratio < 1.0):
            raise ConfigError("poison_ratio must lie in [0, 1)")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if not self.snr_sweep:
            raise ConfigError("snr_sweep must be non-empty")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["train"]["channel"] = {"kind": self.train.channel.kind,
                                 "snr_db": self.train.channel.snr_db}
        d["patch_position"] = list(self.patch_position)
        d["snr_sweep"] = list(self.snr_sweep)
        d["defense"]["pr_list"] = list(self.defense.pr_list)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            if "train" in d:
                t = dict(d["train"])
                if "channel" in t:
                    t["channel"] = ChannelSpec(**t["channel"])
                d["train"] = TrainConfig(**t)
            if "defense" in d:
                dd = dict(d["defense"])
                if "pr_list" in dd:
                    dd["pr_list"] = tuple(dd["pr_list"])
                d["defense"] = PruneSweepConfig(**dd)
            if "reveng" in d:
                d["reveng"] = RevEngConfig(**d["reveng"])
            if "patch_position" in d:
                d["patch_position"] = tuple(d["patch_position"])
            if "snr_sweep" in d:
                d["snr_sweep"] = tuple(d["snr_sweep"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @property
    def experiment_id(self) -> str:
        payload = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def write_records(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.experiment_id, r.metric, repr(float(r.value)),
                        repr(float(r.poison_ratio)), repr(float(r.snr_db)),
                        repr(float(r.cr)), r.seed])


def read_records(path):
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(ResultRecord(
                row["experiment_id"], row["metric"], float(row["value"]),
                float(row["poison_ratio"]), float(row["snr_db"]),
                float(row["cr"]), int(row["seed"]),
            ))
    return records


def write_manifest(cfg: ExperimentConfig, directory, kind, extra=None):
    manifest = {
        "experiment_id": cfg.experiment_id,
        "kind": kind,
        "config": cfg.to_json_dict(),
        "snr_note": "averages are taken over the configured snr_sweep",
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def f1_score(predicted, actual) -> float:
    """F1 with the poisoned class as positive; 0 when no positives exist."""
    if len(predicted) != len(actual):
        raise ValueError("prediction/truth length mismatch")
    tp = sum(1 for p, a in zip(predicted, actual) if p and a)
    fp = sum(1 for p, a in zip(predicted, actual) if p and not a)
    fn = sum(1 for p, a in zip(predicted, actual) if not p and a)
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def _experiment_setup(cfg: ExperimentConfig):
    d_t, d_r = ingest_dataset(cfg.dataset, cfg.subset_size, cfg.seed, cfg.data_dir)
    shape = d_t.symbol_shape
    trig = make_patch_trigger(shape, cfg.patch_size, cfg.patch_size,
                              cfg.patch_position, cfg.patch_color)
    target = default_target(d_t, cfg.target_label)
    plan = PoisonPlan(cfg.poison_ratio, target, cfg.target_label,
                      patch_geometry={"size": cfg.patch_size,
                                      "position": list(cfg.patch_position),
                                      "color": cfg.patch_color})
    gen = torch.Generator().manual_seed(cfg.seed * 7_919 + 1)
    p_t, p_r, plan = poison_datasets(d_t, d_r, plan, trig, gen)
    eval_set, _ = ingest_dataset(cfg.dataset, cfg.eval_size, cfg.seed + 90_001,
                                 cfg.data_dir)
    return d_t, d_r, p_t, p_r, plan, trig, target, eval_set


def run_attack_experiment(cfg: ExperimentConfig, save_models=True):
    """Clean vs backdoored training plus a PSNR sweep over SNR; persists records."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    d_t, d_r, p_t, p_r, plan, trig, target, eval_set = _experiment_setup(cfg)
    clean_model, _ = train(d_t, d_r, cfg.train)
    bd_model, _ = train(p_t, p_r, cfg.train)

    records = []
    cr = cfg.train.compression_ratio
    for snr in cfg.snr_sweep:
        ch = ChannelSpec("awgn", snr)
        for name, model in (("clean", clean_model), ("backdoored", bd_model)):
            gen = torch.Generator().manual_seed(cfg.seed * 13 + int(snr * 10))
            psnrc, psnrp = evaluate_attack(model, eval_set, trig, target, ch, gen)
            # the clean model's row carries poison_ratio 0: no poisoning occurred
            ratio = cfg.poison_ratio if name == "backdoored" else 0.0
            records.append(ResultRecord(cfg.experiment_id, "PSNRC", psnrc,
                                        ratio, snr, cr, cfg.seed))
            records.append(ResultRecord(cfg.experiment_id, "PSNRP", psnrp,
                                        ratio, snr, cr, cfg.seed))

    write_records(os.path.join(cfg.output_dir, "attack_records.csv"), records)
    write_manifest(cfg, cfg.output_dir, "attack")
    if save_models:
        save_checkpoint(clean_model, os.path.join(cfg.output_dir, "clean_model"),
                        seed=cfg.seed, epochs=cfg.train.epochs, dataset_id=cfg.dataset)
        save_checkpoint(bd_model, os.path.join(cfg.output_dir, "backdoored_model"),
                        seed=cfg.seed, epochs=cfg.train.epochs, dataset_id=cfg.dataset)
    return records, clean_model, bd_model


def _triggered_psnr(model, eval_set, trig, originals_vs=None, channel=None, gen=None):
    xs = eval_set.symbols
    with torch.no_grad():
        recon = model.decode(channel_transmit(
            model.encode(apply_trigger(xs, trig)), channel, gen
        ))
    ref = xs if originals_vs is None else originals_vs
    return sum(psnr(recon[i], ref[i] if ref.dim() == 4 else ref)
               for i in range(len(xs))) / len(xs)


def run_defense_experiment(cfg: ExperimentConfig, models=None):
    """Pruning + reverse-engineering defense metrics on the backdoored model."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    d_t, d_r, p_t, p_r, plan, trig, target, eval_set = _experiment_setup(cfg)
    if models is None:
        clean_model, _ = train(d_t, d_r, cfg.train)
        bd_model, _ = train(p_t, p_r, cfg.train)
    else:
        clean_model, bd_model = models

    ch = cfg.train.channel
    cr = cfg.train.compression_ratio
    rid = cfg.experiment_id
    ratio, seed, snr = cfg.poison_ratio, cfg.seed, ch.snr_db
    records = []

    q = min(cfg.defense.defense_sample_count, len(p_t))
    dgen = torch.Generator().manual_seed(cfg.defense.seed * 104_729 + cfg.seed)
    defense_idx = torch.randperm(len(p_t), generator=dgen)[:q]
    d_defense = p_t.symbols[defense_idx]
    pruned, report = prune_defense(bd_model, d_defense, cfg.defense)
    poisoned_truth = set(plan.poisoned_indices or [])
    labels_truth = [int(defense_idx[i]) in poisoned_truth
                    for i in report.sample_indices]
    f1 = f1_score([bool(v) for v in report.poison_labels], labels_truth)
    records.append(ResultRecord(rid, "F1", f1, ratio, snr, cr, seed))
    records.append(ResultRecord(rid, "pr_star", report.pr_star, ratio, snr, cr, seed))

    def stats(model):
        gen = lambda k: torch.Generator().manual_seed(seed * 31 + k)
        pc, pa = evaluate_attack(model, eval_set, trig, target, ch, gen(1))
        rpp = _triggered_psnr(model, eval_set, trig, None, ch, gen(2))
        return pc, pa, rpp

    pc0, pa0, rpp0 = stats(bd_model)
    pc1, pa1, rpp1 = stats(pruned)
    pc_clean, _, rpp_clean = stats(clean_model)
    clean_drop = 100.0 * (pc0 - pc1) / pc0
    recovery_db = rpp1 - rpp0
    denom = rpp_clean - rpp0
    recovery_pct = 100.0 * recovery_db / denom if abs(denom) > 1e-9 else 0.0
    records.append(ResultRecord(rid, "clean_drop_pct", clean_drop, ratio, snr, cr, seed))
    records.append(ResultRecord(rid, "attack_drop_db", pa0 - pa1, ratio, snr, cr, seed))
    records.append(ResultRecord(rid, "recovery_db", recovery_db, ratio, snr, cr, seed))
    records.append(ResultRecord(rid, "poison_recovery_pct", recovery_pct,
                                ratio, snr, cr, seed))

    est = estimate_trigger(bd_model, eval_set, cfg.reveng)
    score = verify_trigger(bd_model, est, eval_set, ch,
                           torch.Generator().manual_seed(seed * 31 + 3))
    records.append(ResultRecord(rid, "verify_score", score, ratio, snr, cr, seed))

    write_records(os.path.join(cfg.output_dir, "defense_records.csv"), records)
    write_manifest(cfg, cfg.output_dir, "defense",
                   extra={"pr_list": list(cfg.defense.pr_list)})
    report.export_csv(os.path.join(cfg.output_dir, "prune_report.csv"))
    est.export_trace_csv(os.path.join(cfg.output_dir, "reveng_trace.csv"))
    return records, report, est


def replay_experiment(manifest_path):
    """Re-run an experiment from its manifest; returns (matches, csv_path)."""
    with open(manifest_path) as f:
        manifest = json.load(f)
    cfg = ExperimentConfig.from_json_dict(manifest["config"])
    kind = manifest["kind"]
    name = "attack_records.csv" if kind == "attack" else "defense_records.csv"
    original = os.path.join(os.path.dirname(manifest_path), name)
    with open(original, "rb") as f:
        before = f.read()
    if kind == "attack":
        run_attack_experiment(cfg, save_models=False)
    else:
        run_defense_experiment(cfg)
    with open(os.path.join(cfg.output_dir, name), "rb") as f:
        after = f.read()
    return before == after, original
