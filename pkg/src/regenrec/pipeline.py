"""Pipeline stages: mine -> pretrain -> regenerate -> train -> evaluate, and multi-seed comparison.

Every stage writes under ``<out>/<stage>/`` and leaves a ``config.json``
echo holding all effective values and stage seeds.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, figures
from .bilevel import train_dr4sr_plus
from .config import PipelineConfig, write_echo
from .corpus import Dataset, Sequence, generate_synthetic, leave_one_out_split, load_dataset, save_dataset
from .evalkit import evaluate
from .miner import build_pretrain_pairs, mine_patterns, read_patterns, write_patterns
from .personalizer import dataset_weights, write_weights
from .regenerator import pretrain, regenerate_dataset
from .target_models import train_target

logger = logging.getLogger(__name__)

VARIANTS = ("baseline", "dr4sr", "dr4sr_plus")


class PipelineError(RuntimeError):
    pass


def stage_dir(cfg: PipelineConfig, stage: str) -> Path:
    path = Path(cfg.out) / stage
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, command: str) -> Path:
    if not path.exists():
        raise PipelineError(f"{path} is missing; run `regenrec {command}` with the same --out first")
    return path


def _write_tsv(path, header, rows):
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def _setup(cfg):
    torch.set_num_threads(cfg.threads)


def load_data(cfg: PipelineConfig):
    """Original dataset and its leave-one-out split (truncation happens before splitting)."""
    d = cfg.data
    if d.path:
        ds = load_dataset(d.path, max_len=d.max_len, remap=d.remap)
    else:
        ds = generate_synthetic(
            d.num_users, d.num_items, d.planted_patterns, d.noise_rate, cfg.stage_seed("data"),
            patterns_per_user=tuple(d.patterns_per_user),
        )
    return ds, leave_one_out_split(ds)


def mining_data(cfg: PipelineConfig) -> Dataset:
    """Sequences for mining and pre-training: train prefixes by default, so held-out items never leak."""
    ds, split = load_data(cfg)
    return ds if cfg.mine_source == "full" else split.train


def cmd_mine(cfg: PipelineConfig) -> dict:
    _setup(cfg)
    out = stage_dir(cfg, "mine")
    ds = mining_data(cfg)
    patterns = mine_patterns(ds, cfg.miner)
    pairs = build_pretrain_pairs(ds, patterns, cfg.miner)
    write_patterns(patterns, out / "patterns.txt")
    summary = {
        "sequences": len(ds),
        "patterns": len(patterns),
        "pairs": len(pairs),
        "mean_pairs_per_sequence": len(pairs) / len(ds),
    }
    _write_tsv(out / "summary.tsv", ["key", "value"], summary.items())
    write_echo(cfg, out / "config.json", stage="mine")
    return summary


def cmd_pretrain(cfg: PipelineConfig) -> dict:
    _setup(cfg)
    out = stage_dir(cfg, "pretrain")
    patterns = read_patterns(_require(Path(cfg.out) / "mine" / "patterns.txt", "mine"))
    ds = mining_data(cfg)
    pairs = build_pretrain_pairs(ds, patterns, cfg.miner)
    if not pairs:
        raise PipelineError("mining produced no pre-training pairs; lower miner.threshold")
    model, history = pretrain(ds, pairs, cfg.regenerator, cfg.stage_seed("pretrain"))
    checkpoint.save(out / "regenerator.pt", "regenerator", cfg.regenerator, ds.num_items, model)
    keys = ["epoch", "train_loss"] + (["holdout_loss"] if "holdout_loss" in history[0] else [])
    _write_tsv(out / "loss_curve.tsv", keys, ([r[k] for k in keys] for r in history))
    figures.loss_curve(history, out / "loss_curve.png")
    write_echo(cfg, out / "config.json", stage="pretrain")
    return {"epochs": len(history), **history[-1]}


def cmd_regenerate(cfg: PipelineConfig) -> dict:
    _setup(cfg)
    out = stage_dir(cfg, "regenerate")
    model = checkpoint.load_regenerator(_require(Path(cfg.out) / "pretrain" / "regenerator.pt", "pretrain"))
    _, split = load_data(cfg)
    regen = regenerate_dataset(model, split.train, cfg.gamma, cfg.stage_seed("regenerate"), dedup=cfg.dedup)
    save_dataset(regen, out / "regenerated.txt")
    with (out / "provenance.txt").open("w", encoding="utf-8", newline="\n") as fh:
        for line_no, (user, k) in enumerate(regen.provenance):
            fh.write(f"{line_no} {user} {k}\n")
    source = {s.user_id: set(s.items) for s in split.train}
    outside = sum(i not in source[u] for s, (u, _) in zip(regen, regen.provenance) for i in s.items)
    total = sum(len(s) for s in regen)
    stats = {
        "original_sequences": len(split.train),
        "original_mean_length": float(np.mean([len(s) for s in split.train])),
        "patterns": len(regen),
        "mean_length": float(np.mean([len(s) for s in regen])),
        "distinct_patterns": len({s.items for s in regen}),
        "out_of_sequence_item_fraction": outside / total,
    }
    _write_tsv(out / "stats.tsv", ["key", "value"], stats.items())
    figures.length_histogram(split.train, regen, out / "length_hist.png")
    write_echo(cfg, out / "config.json", stage="regenerate")
    return stats


def load_regenerated(cfg: PipelineConfig, num_items: int) -> Dataset:
    base = Path(cfg.out) / "regenerate"
    ds = load_dataset(_require(base / "regenerated.txt", "regenerate"), max_len=None, num_items=num_items)
    lines = (base / "provenance.txt").read_text(encoding="utf-8").splitlines()
    prov = tuple(tuple(map(int, line.split()[1:3])) for line in lines)
    return dataclasses.replace(ds, provenance=prov, name="regenerated")


def _training_data(cfg, split, variant):
    """(regenerated part, extra original part or None); the baseline trains on the originals alone."""
    if variant == "baseline":
        return split.train, None
    regen = load_regenerated(cfg, split.num_items)
    if not cfg.union_original:
        return regen, None
    offset = 1 + max(s.user_id for s in regen)
    extra = tuple(Sequence(offset + i, s.items) for i, s in enumerate(split.train))
    return regen, Dataset(extra, split.num_items, "original")


def training_data(cfg, split, variant) -> Dataset:
    """Every training sequence of ``variant``, in the order used by the weight dump."""
    main, extra = _training_data(cfg, split, variant)
    if extra is None:
        return main
    return Dataset(main.sequences + extra.sequences, split.num_items, "regenerated+original")


def cmd_train(cfg: PipelineConfig, variant: str) -> dict:
    if variant not in VARIANTS:
        raise PipelineError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    _setup(cfg)
    out = stage_dir(cfg, f"train/{variant}")
    _, split = load_data(cfg)
    main, extra_train = _training_data(cfg, split, variant)
    data = training_data(cfg, split, variant)
    seed = cfg.stage_seed("train")
    extra = {}
    if variant == "dr4sr_plus":
        model, personalizer, trainer = train_dr4sr_plus(
            main, split, cfg.target, cfg.bilevel, seed, log_path=out / "bilevel_log.jsonl", extra_train=extra_train
        )
        history = trainer.history
        extra["personalizer"] = personalizer
        weights = dataset_weights(personalizer, model, data)
        write_weights(weights, out / "weights.txt")
        if trainer.log:
            figures.bilevel_log(trainer.log, out / "bilevel_log.png")
        figures.weight_map(weights, out / "weights.png")
    else:
        model, history = train_target(data, split, cfg.target, seed)
    checkpoint.save(out / "model.pt", "target", cfg.target, split.num_items, model, **extra)
    keys = list(history[0])
    _write_tsv(out / "history.tsv", keys, ([r[k] for k in keys] for r in history))
    report = evaluate(model, split)
    report.config["variant"] = variant
    report.write(out / "report.tsv")
    write_echo(cfg, out / "config.json", stage="train", variant=variant)
    return report.metrics


def cmd_evaluate(cfg: PipelineConfig, checkpoint_path, exclude_seen: bool = False) -> dict:
    _setup(cfg)
    out = stage_dir(cfg, "evaluate")
    path = Path(checkpoint_path)
    if not path.exists():
        raise PipelineError(f"checkpoint {path} not found; run `regenrec train` first")
    model, _ = checkpoint.load_target(path)
    _, split = load_data(cfg)
    report = evaluate(model, split, exclude_seen=exclude_seen)
    name = path.parent.name if path.parent.name in VARIANTS else path.stem
    report.config["checkpoint"] = name
    report.write(out / f"{name}.tsv", rank_dump=out / f"{name}_ranks.tsv")
    write_echo(cfg, out / "config.json", stage="evaluate", checkpoint=name)
    return report.metrics


def cmd_run(cfg: PipelineConfig, variant: str = "dr4sr_plus") -> dict:
    """mine -> pretrain -> regenerate -> train(variant) -> evaluate."""
    cmd_mine(cfg)
    cmd_pretrain(cfg)
    cmd_regenerate(cfg)
    cmd_train(cfg, variant)
    return cmd_evaluate(cfg, Path(cfg.out) / "train" / variant / "model.pt")


def cmd_compare(cfg: PipelineConfig, variants=VARIANTS) -> dict:
    """Run every variant for each seed in ``compare_seeds``; tabulate mean and std of test metrics."""
    root = stage_dir(cfg, "compare")
    table = {v: [] for v in variants}
    for seed in cfg.compare_seeds:
        sub = dataclasses.replace(cfg, seed=seed, out=str(root / f"seed_{seed}"))
        if any(v != "baseline" for v in variants):
            cmd_mine(sub)
            cmd_pretrain(sub)
            cmd_regenerate(sub)
        for v in variants:
            table[v].append(cmd_train(sub, v))
    metrics = sorted(k for k in table[variants[0]][0] if k.startswith("test_"))
    rows = []
    for v in variants:
        for m in metrics:
            vals = [r[m] for r in table[v]]
            rows.append([v, m, float(np.mean(vals)), float(np.std(vals)), " ".join(f"{x:.6f}" for x in vals)])
    _write_tsv(root / "table.tsv", ["variant", "metric", "mean", "std", "per_seed"], rows)
    figures.compare_bars(table, root / "ndcg10.png")
    (root / "table.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_echo(cfg, root / "config.json", stage="compare")
    return table
