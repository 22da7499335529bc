"""Dry run of the synthetic ordering experiment at reduced and full scale.

Times each stage and prints per-seed metric pairs so the acceptance
configuration (tile size, batch size, budgets) can be chosen with evidence
rather than hope. Not part of the test suite.
"""

import argparse
import statistics
import tempfile
import time
from pathlib import Path

import torch

from elevssl.ablation import ExperimentConfig, run_ablation
from elevssl.models import EncoderSpec
from elevssl.synthetic import SynthConfig, generate_synthetic
from elevssl.training import FinetuneConfig, PretrainConfig


def run(task, methods, data_dir, out_dir, seeds, epochs, batch):
    cfg = ExperimentConfig(
        data_dir=str(data_dir),
        task=task,
        methods=methods,
        budgets=[32],
        seeds=seeds,
        pretrain=PretrainConfig(
            method=methods[-1], epochs=epochs, batch_size=batch,
            encoder=EncoderSpec.tiny(),
        ),
        finetune=FinetuneConfig(
            task=task, init="random", encoder=EncoderSpec.tiny(),
        ),
        out_dir=str(out_dir),
        eval_pool=96,
        finetune_pool=32,
    )
    t0 = time.perf_counter()
    rows = run_ablation(cfg, quiet=False)
    wall = time.perf_counter() - t0
    return rows, wall


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--tile", type=int, default=64)
    ap.add_argument("--elev", type=int, default=21)
    ap.add_argument("--keep", help="directory to keep artifacts in")
    args = ap.parse_args()

    torch.set_num_threads(1)
    tmp = Path(args.keep) if args.keep else Path(tempfile.mkdtemp(prefix="calib_"))
    tmp.mkdir(parents=True, exist_ok=True)
    data_dir = tmp / "data"

    t0 = time.perf_counter()
    synth = SynthConfig(
        n_tiles=512, seed=20, coupling=0.9,
        tile_shape=(args.tile, args.tile), elev_shape=(args.elev, args.elev),
        pure_fraction=0.5,
    )
    generate_synthetic(synth, data_dir)
    print(f"synth: {time.perf_counter() - t0:.1f}s -> {data_dir}")

    seeds = list(range(args.seeds))
    total = 0.0
    for task, methods, key in (
        ("segmentation", ["random", "glcnet_elev"], "miou"),
        ("classification", ["random", "simclr_elev"], "macro_f1"),
    ):
        rows, wall = run(task, methods, data_dir, tmp / task, seeds, args.epochs, args.batch)
        total += wall
        by = {(r["method"], r["seed"]): r["metrics"][key] for r in rows}
        base = [by[(methods[0], s)] for s in seeds]
        elev = [by[(methods[1], s)] for s in seeds]
        wins = sum(e >= b for e, b in zip(elev, base))
        print(f"\n{task} ({key}), wall {wall/60:.1f} min")
        for s in seeds:
            flag = "W" if elev[s] >= base[s] else "L"
            print(f"  seed {s}: {methods[1]}={elev[s]:.4f}  {methods[0]}={base[s]:.4f}  {flag}")
        print(f"  median {methods[1]}={statistics.median(elev):.4f} "
              f"{methods[0]}={statistics.median(base):.4f}  wins {wins}/{len(seeds)}")
    print(f"\ntotal experiment wall: {total/60:.1f} min (target < 30)")


if __name__ == "__main__":
    main()
