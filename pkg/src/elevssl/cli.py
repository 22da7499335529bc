"""Command-line entry point.

Subcommands: synth | pretrain | finetune | evaluate | ablate | plot.
Every command exits 0 on success, 2 on a configuration problem (with a
field-level message), and 1 on a runtime failure. The ELEVSSL_THREADS
environment variable caps intra-op threads (training itself is
single-threaded by design, so this also bounds total parallelism).

Commands read one JSON config document (--config). Sections used per
command: "synth" (tile generator), "data_dir" + "split" + "pretrain"
(pre-training), likewise "finetune"; `ablate` consumes the document itself
as the experiment definition (minus the "synth"/"split" sections). Command
line flags override their config counterparts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import torch

from . import ablation, plotting
from .data import (
    load_manifest,
    load_split,
    save_split,
    split_dataset,
    derive_classification_set,
)
from .synthetic import SynthConfig, generate_synthetic
from .training import (
    FinetuneConfig,
    PretrainConfig,
    finetune,
    load_model,
    pretrain,
    save_model,
)
from .util import config_hash
from .metrics import evaluate_classifier, evaluate_segmenter


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit status 2."""


def _load_doc(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return doc


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required for this command")
    return Path(args.out)


def _build_synth_config(args) -> SynthConfig:
    doc = _load_doc(args.config)
    section = dict(doc.get("synth", {}))
    overrides = {
        "n_tiles": args.tiles,
        "seed": args.seed,
        "coupling": args.coupling,
        "bump_count": args.bumps,
        "label_noise": args.label_noise,
        "pure_fraction": args.pure_fraction,
        "noise_sigma": args.noise_sigma,
        "tint_range": args.tint_range,
    }
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    if args.tile_size is not None:
        section["tile_shape"] = (args.tile_size, args.tile_size)
    if args.elev_size is not None:
        section["elev_shape"] = (args.elev_size, args.elev_size)
    if args.elev_range is not None:
        section["elev_range"] = tuple(args.elev_range)
    known = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"synth config: unknown field(s) {sorted(unknown)}")
    for key in ("tile_shape", "elev_shape", "elev_range"):
        if key in section:
            section[key] = tuple(section[key])
    try:
        cfg = SynthConfig(**section)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth config: {exc}") from exc
    return cfg


def cmd_synth(args) -> int:
    cfg = _build_synth_config(args)
    out_dir = _require_out(args)
    manifest = generate_synthetic(cfg, out_dir)
    if not args.quiet:
        print(f"wrote {len(manifest)} tiles to {out_dir} (manifest.jsonl)")
    return 0


def _resolve_data_dir(args, doc) -> Path:
    data = getattr(args, "data", None) or doc.get("data_dir")
    if data is None:
        raise ConfigError("data_dir missing: pass --data or set data_dir in the config")
    data = Path(data)
    if not (data / "manifest.jsonl").exists():
        raise ConfigError(f"no manifest.jsonl under data dir {data}")
    return data


def _resolve_split(args, doc, manifest, task: str, out_dir: Path):
    split_arg = getattr(args, "split", None)
    section = dict(doc.get("split", {}))
    if split_arg is not None:
        section = {"path": split_arg}
    if "path" in section:
        p = Path(section["path"])
        if not p.exists():
            raise ConfigError(f"split file not found: {p}")
        return load_split(p), None
    try:
        eval_pool = int(section["eval_pool"])
        finetune_pool = int(section["finetune_pool"])
        seed = int(section.get("seed", 0))
    except KeyError as exc:
        raise ConfigError(
            "split section needs eval_pool and finetune_pool (or a path)"
        ) from exc
    candidates = None
    if task == "classification":
        labeled = derive_classification_set(manifest, manifest.ids())
        candidates = [tid for tid, _ in labeled]
    try:
        split = split_dataset(
            manifest, eval_pool, finetune_pool, seed=seed, candidate_ids=candidates
        )
    except ValueError as exc:
        raise ConfigError(f"split: {exc}") from exc
    split_path = out_dir / "splits.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_split(split, split_path)
    return split, split_path


def cmd_pretrain(args) -> int:
    doc = _load_doc(args.config)
    try:
        cfg = PretrainConfig.from_dict(doc.get("pretrain", {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.method is not None:
        cfg = dataclasses.replace(cfg, method=args.method)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out_dir = _require_out(args)
    data_dir = _resolve_data_dir(args, doc)
    manifest = load_manifest(data_dir / "manifest.jsonl")
    task = doc.get("task", "segmentation")
    split, split_path = _resolve_split(args, doc, manifest, task, out_dir)
    ckpt_path = out_dir / f"{cfg.method}_seed{cfg.seed}.ckpt"
    if not args.quiet:
        print(f"pre-training {cfg.method} (seed {cfg.seed}) on {len(split.pretrain_ids)} tiles")
    pretrain(cfg, manifest, split, ckpt_path)
    if not args.quiet:
        print(f"checkpoint: {ckpt_path}")
        if split_path is not None:
            print(f"split: {split_path}")
    return 0


def cmd_finetune(args) -> int:
    doc = _load_doc(args.config)
    try:
        cfg = FinetuneConfig.from_dict(doc.get("finetune", {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.init is not None:
        cfg = dataclasses.replace(cfg, init=args.init)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.task is not None:
        cfg = dataclasses.replace(cfg, task=args.task)
    if cfg.init == "random" and cfg.encoder is None and "pretrain" in doc:
        pre = PretrainConfig.from_dict(doc["pretrain"])
        cfg = dataclasses.replace(cfg, encoder=pre.encoder)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _require_out(args)
    model_path = out / "model.ckpt" if out.suffix == "" else out
    data_dir = _resolve_data_dir(args, doc)
    manifest = load_manifest(data_dir / "manifest.jsonl")
    split, _ = _resolve_split(args, doc, manifest, cfg.task, model_path.parent)
    ids = split.finetune_ids
    if args.budget is not None:
        if args.budget < 1 or args.budget > len(ids):
            raise ConfigError(
                f"budget {args.budget} outside [1, {len(ids)}] for this split"
            )
        ids = ids[: args.budget]
    if not args.quiet:
        print(f"fine-tuning {cfg.task} on {len(ids)} labeled tiles (init={cfg.init})")
    model, log = finetune(cfg, manifest, ids)
    save_model(
        model,
        model_path,
        extra_meta={
            "config_hash": config_hash(cfg.to_dict()),
            "init": cfg.init,
            "budget": len(ids),
            "seed": cfg.seed,
        },
    )
    log_path = model_path.parent / (model_path.stem + "_log.jsonl")
    with open(log_path, "w") as fh:
        for record in log:
            fh.write(json.dumps(record) + "\n")
    if not args.quiet:
        print(f"model: {model_path}")
    return 0


def cmd_evaluate(args) -> int:
    if args.model is None:
        raise ConfigError("--model is required")
    if args.split is None:
        raise ConfigError("--split is required")
    doc = _load_doc(args.config)
    data_dir = _resolve_data_dir(args, doc)
    manifest = load_manifest(data_dir / "manifest.jsonl")
    split = load_split(Path(args.split))
    subset_ids = {
        "test": split.test_ids,
        "finetune": split.finetune_ids,
        "pretrain": split.pretrain_ids,
    }[args.subset]
    if not subset_ids:
        raise ConfigError(f"subset {args.subset!r} of {args.split} is empty")
    model, meta = load_model(Path(args.model))
    if model.task == "classification":
        report = evaluate_classifier(model, manifest, subset_ids)
    else:
        report = evaluate_segmenter(model, manifest, subset_ids)
    payload = report.to_dict(
        provenance={
            "model": str(args.model),
            "arch_hash": meta.get("arch_hash"),
            "model_config_hash": meta.get("config_hash"),
            "subset": args.subset,
            "split_seed": split.seed,
            "task": model.task,
        }
    )
    out = _require_out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n")
    if not args.quiet:
        print(f"report: {out}")
    return 0


def cmd_ablate(args) -> int:
    doc = _load_doc(args.config)
    if not doc:
        raise ConfigError("ablate requires --config with an experiment definition")
    doc = {k: v for k, v in doc.items() if k not in ("synth", "split")}
    if args.out is not None:
        doc["out_dir"] = str(args.out)
    try:
        cfg = ablation.ExperimentConfig.from_dict(doc)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = ablation.run_ablation(cfg, quiet=args.quiet)
    if not args.quiet:
        print(f"{len(rows)} result rows in {Path(cfg.out_dir) / 'results.jsonl'}")
    return 0


def cmd_plot(args) -> int:
    results_path = Path(args.results)
    if results_path.is_dir():
        results_path = results_path / "results.jsonl"
    rows = ablation.load_results(results_path)
    if not rows:
        raise ConfigError(f"no result rows found at {results_path}")
    metric = args.metric
    if metric is None:
        doc = _load_doc(args.config)
        task = args.task or doc.get("task")
        if task == "classification":
            metric = "macro_f1"
        elif task == "segmentation":
            metric = "miou"
        else:
            raise ConfigError("pass --metric, --task, or a config with a task field")
    out_dir = Path(args.out) if args.out is not None else results_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = plotting.summarize_results(rows, metric)
    plotting.write_summary_csv(out_dir / "summary.csv", summary, metric)
    plotting.render_plot_svg(
        out_dir / "plot.svg", summary, metric_name=metric, title=f"{metric} vs label budget"
    )
    if not args.quiet:
        print(f"wrote {out_dir / 'plot.svg'} and {out_dir / 'summary.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output path (file or directory per command)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(
        prog="elevssl",
        description="Elevation-aware contrastive pre-training toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic tile dataset")
    p.add_argument("--tiles", type=int, help="number of tiles")
    p.add_argument("--coupling", type=float, help="elevation-class coupling in [0,1]")
    p.add_argument("--bumps", type=int, help="terrain bumps per tile")
    p.add_argument("--label-noise", type=float, dest="label_noise")
    p.add_argument("--pure-fraction", type=float, dest="pure_fraction")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--tint-range", type=float, dest="tint_range")
    p.add_argument("--tile-size", type=int, dest="tile_size", help="square RGB size")
    p.add_argument("--elev-size", type=int, dest="elev_size", help="square elevation size")
    p.add_argument("--elev-range", type=float, nargs=2, dest="elev_range", metavar=("MIN", "MAX"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="run self-supervised pre-training")
    p.add_argument("--method", choices=("simclr", "glcnet", "elevation", "simclr_elev", "glcnet_elev"))
    p.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p.add_argument("--split", help="existing split JSON (otherwise derived from config)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="two-phase downstream fine-tuning")
    p.add_argument("--init", help='checkpoint path or "random"')
    p.add_argument("--task", choices=("classification", "segmentation"))
    p.add_argument("--budget", type=int, help="use only the first N labeled tiles")
    p.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p.add_argument("--split", help="existing split JSON (otherwise derived from config)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a fine-tuned model")
    p.add_argument("--model", help="model archive path")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", help="split JSON path")
    p.add_argument("--subset", choices=("test", "finetune", "pretrain"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="label-budget ablation harness")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", parents=[common], help="plot results.jsonl to SVG + CSV")
    p.add_argument("--results", required=True, help="results.jsonl or its directory")
    p.add_argument("--metric", choices=("macro_f1", "miou"))
    p.add_argument("--task", choices=("classification", "segmentation"))
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("ELEVSSL_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"config error: ELEVSSL_THREADS={threads!r} is not an integer", file=sys.stderr)
            return 2
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime failure: one machine-parsable line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
