"""Label-budget ablation harness.

For every experiment seed the dataset is split once; budget subsets are
nested prefixes of the shuffled fine-tuning pool, so budget b's labeled ids
are a subset of budget b' > b's for the same seed. Pre-training runs once
per (method, seed) and the checkpoint is reused across budgets. Results are
appended to results.jsonl one completed cell at a time, which makes resume
idempotent: finished (method, budget, seed) cells are never recomputed.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import (
    DatasetManifest,
    derive_classification_set,
    load_manifest,
    split_dataset,
)
from .metrics import evaluate_classifier, evaluate_segmenter
from .plotting import render_plot_svg, summarize_results, write_summary_csv
from .training import (
    FinetuneConfig,
    PretrainConfig,
    finetune,
    pretrain,
    _dataclass_from_dict,
)
from .util import config_hash

CLASSIFICATION_METHODS = ("random", "simclr", "simclr_elev", "elevation")
SEGMENTATION_METHODS = ("random", "glcnet", "glcnet_elev", "elevation")


@dataclass
class ExperimentConfig:
    data_dir: str
    task: str
    methods: list[str]
    budgets: list[int]
    seeds: list[int]
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    out_dir: str
    eval_pool: int = 128
    finetune_pool: int = 64

    def validate(self) -> None:
        if self.task not in ("classification", "segmentation"):
            raise ValueError(f"task must be classification or segmentation, got {self.task!r}")
        allowed = (
            CLASSIFICATION_METHODS if self.task == "classification" else SEGMENTATION_METHODS
        )
        for m in self.methods:
            if m not in allowed:
                raise ValueError(f"method {m!r} is not valid for {self.task} (allowed: {allowed})")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if not self.budgets:
            raise ValueError("budgets must be nonempty")
        if any(b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            raise ValueError(f"budgets must be strictly increasing, got {self.budgets}")
        if self.budgets[0] < 1:
            raise ValueError("budgets must be positive")
        if self.budgets[-1] > self.finetune_pool:
            raise ValueError(
                f"largest budget {self.budgets[-1]} exceeds the fine-tune pool "
                f"of {self.finetune_pool}"
            )
        if not self.finetune_pool < self.eval_pool:
            raise ValueError("finetune_pool must be smaller than eval_pool")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(payload: dict) -> "ExperimentConfig":
        data = dict(_dataclass_from_dict(ExperimentConfig, payload, "experiment config"))
        missing = [
            k for k in ("data_dir", "task", "methods", "budgets", "seeds", "out_dir")
            if k not in data
        ]
        if missing:
            raise ValueError(f"experiment config: missing field(s) {missing}")
        data["pretrain"] = PretrainConfig.from_dict(data.get("pretrain", {}))
        fsec = data.get("finetune", {})
        if (
            isinstance(fsec, dict)
            and fsec.get("init", "random") == "random"
            and fsec.get("encoder") is None
        ):
            # the harness injects the pre-training encoder per cell anyway
            fsec = {**fsec, "encoder": data["pretrain"].encoder.to_dict()}
        data["finetune"] = FinetuneConfig.from_dict(fsec)
        cfg = ExperimentConfig(**data)
        cfg.validate()
        return cfg


def result_key(row: dict) -> tuple[str, int, int]:
    return (row["method"], int(row["budget"]), int(row["seed"]))


def load_results(path: Path) -> list[dict]:
    rows = []
    path = Path(path)
    if path.exists():
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
    return rows


def budget_ids(split_finetune_ids: list[str], budget: int) -> list[str]:
    """Nested budget subsets: the first `budget` ids of the (already
    seed-shuffled) fine-tuning pool."""
    if budget > len(split_finetune_ids):
        raise ValueError(
            f"budget {budget} exceeds the {len(split_finetune_ids)}-tile pool"
        )
    return split_finetune_ids[:budget]


def _make_split(cfg: ExperimentConfig, manifest: DatasetManifest, seed: int):
    candidates = None
    if cfg.task == "classification":
        labeled = derive_classification_set(manifest, manifest.ids())
        candidates = [tid for tid, _ in labeled]
    return split_dataset(
        manifest, cfg.eval_pool, cfg.finetune_pool, seed=seed, candidate_ids=candidates
    )


def _checkpoint_for(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    method: str,
    seed: int,
    split,
    quiet: bool,
) -> Optional[Path]:
    if method == "random":
        return None
    ckpt_dir = Path(cfg.out_dir) / "checkpoints"
    ckpt_path = ckpt_dir / f"{method}_seed{seed}.ckpt"
    if ckpt_path.exists():
        return ckpt_path
    pcfg = dataclasses.replace(cfg.pretrain, method=method, seed=seed)
    if not quiet:
        print(f"[ablate] pre-training {method} (seed {seed}) ...", flush=True)
    pretrain(pcfg, manifest, split, ckpt_path)
    return ckpt_path


def run_ablation(cfg: ExperimentConfig, quiet: bool = False) -> list[dict]:
    """Run all (method, budget, seed) cells, resuming past completed rows,
    then write summary.csv and plot.svg. Returns all result rows."""
    cfg.validate()
    manifest = load_manifest(Path(cfg.data_dir) / "manifest.jsonl")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.jsonl"
    rows = load_results(results_path)
    done = {result_key(r) for r in rows}
    cfg_hash = config_hash(cfg.to_dict())

    splits = {seed: _make_split(cfg, manifest, seed) for seed in cfg.seeds}
    for seed in cfg.seeds:
        if cfg.budgets[-1] > len(splits[seed].finetune_ids):
            raise ValueError(
                f"seed {seed}: largest budget {cfg.budgets[-1]} exceeds the "
                f"{len(splits[seed].finetune_ids)}-tile fine-tune pool"
            )

    metric_key = "macro_f1" if cfg.task == "classification" else "miou"
    for seed in cfg.seeds:
        split = splits[seed]
        for method in cfg.methods:
            ckpt = None
            needed = [
                b for b in cfg.budgets if (method, b, seed) not in done
            ]
            if needed:
                ckpt = _checkpoint_for(cfg, manifest, method, seed, split, quiet)
            for budget in needed:
                ids = budget_ids(split.finetune_ids, budget)
                fcfg = dataclasses.replace(
                    cfg.finetune,
                    task=cfg.task,
                    seed=seed,
                    init="random" if ckpt is None else str(ckpt),
                    encoder=cfg.pretrain.encoder,
                )
                if not quiet:
                    print(
                        f"[ablate] {method} budget={budget} seed={seed} ...",
                        flush=True,
                    )
                t0 = time.perf_counter()
                model, _ = finetune(fcfg, manifest, ids)
                if cfg.task == "classification":
                    report = evaluate_classifier(model, manifest, split.test_ids)
                else:
                    report = evaluate_segmenter(model, manifest, split.test_ids)
                wall = time.perf_counter() - t0
                row = {
                    "method": method,
                    "budget": budget,
                    "seed": seed,
                    "metrics": report.to_dict(
                        provenance={
                            "checkpoint": str(ckpt) if ckpt else "random",
                            "split_seed": seed,
                            "method": method,
                            "budget": budget,
                        }
                    ),
                    "wall_seconds": wall,
                    "config_hash": cfg_hash,
                }
                with open(results_path, "a") as fh:
                    fh.write(json.dumps(row) + "\n")
                rows.append(row)
                done.add((method, budget, seed))

    summary = summarize_results(rows, metric_key)
    write_summary_csv(out_dir / "summary.csv", summary, metric_key)
    render_plot_svg(
        out_dir / "plot.svg",
        summary,
        metric_name=metric_key,
        title=f"{cfg.task}: {metric_key} vs label budget",
    )
    return rows
