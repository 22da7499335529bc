"""Pre-training engines for the five methods (simclr, glcnet, elevation,
simclr_elev, glcnet_elev) and the two-phase fine-tuning protocol for
classification and segmentation.

Determinism contract: single-threaded execution with a fixed seed produces
bit-identical checkpoints. Every stochastic draw comes from a generator
derived from (seed, purpose, epoch, index): batch order from
(seed, "order", epoch) and per-sample augmentations from
(seed, "aug", epoch, dataset_index), so results are independent of batching
internals. All methods draw the three view specs in the same fixed order
(contrast A, contrast B, elevation view) before any method-specific draws;
zero-weighted loss branches are skipped entirely (no forward pass, hence no
batch-norm statistics drift), which makes the boundary settings alpha=0 and
alpha=1 reduce bit-identically to the corresponding pure methods.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import (
    AugPolicy,
    AugSpec,
    OverlapTooSmall,
    apply_spec,
    apply_spec_to_elevation,
    matched_regions,
    sample_aug_spec,
)
from .checkpoint import collect_state, load_archive, load_state_into, save_archive
from .data import (
    DatasetManifest,
    ElevationStats,
    SplitAssignment,
    compute_elevation_stats,
    load_tile,
    normalize_elevation,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    combined_loss,
    elevation_loss,
    glcnet_combine,
    local_matching_loss,
    nt_xent,
)
from .models import (
    ClassifierHead,
    EncoderSpec,
    ProjectionHead,
    ProjectionHeadSpec,
    ResidualEncoder,
    UDecoder,
    make_elevation_decoder,
    make_local_decoder,
    make_segmentation_decoder,
    seeded_init,
    style_features,
)
from .util import config_hash, derive_rng

PRETRAIN_METHODS = ("simclr", "glcnet", "elevation", "simclr_elev", "glcnet_elev")
CONTRASTIVE_METHODS = ("simclr", "glcnet", "simclr_elev", "glcnet_elev")
MAX_OVERLAP_RETRIES = 10


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _dataclass_from_dict(cls, payload: dict, context: str):
    if not isinstance(payload, dict):
        raise ValueError(f"{context}: expected an object, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ValueError(f"{context}: unknown field(s) {sorted(unknown)}")
    return payload


@dataclass
class PretrainConfig:
    method: str = "simclr_elev"
    epochs: int = 200
    batch_size: int = 256
    lr0: float = 0.001
    weight_decay: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    policy: AugPolicy = field(default_factory=AugPolicy)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    elev_mode: str = "per_pixel"
    n_regions: int = 4
    patch: int = 16
    crop_elev_view: bool = False

    def validate(self) -> None:
        if self.method not in PRETRAIN_METHODS:
            raise ValueError(
                f"method must be one of {PRETRAIN_METHODS}, got {self.method!r}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.method in CONTRASTIVE_METHODS and self.batch_size < 2:
            raise ValueError("contrastive methods need batch_size >= 2")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.elev_mode not in ("per_pixel", "pixel_sum"):
            raise ValueError(f"elev_mode must be per_pixel or pixel_sum, got {self.elev_mode!r}")
        if self.n_regions < 1 or self.patch < 1:
            raise ValueError("n_regions and patch must be positive")
        self.policy.validate()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return out

    @staticmethod
    def from_dict(payload: dict) -> "PretrainConfig":
        data = dict(_dataclass_from_dict(PretrainConfig, payload, "pretrain config"))
        if "weights" in data:
            data["weights"] = LossWeights(
                **_dataclass_from_dict(LossWeights, data["weights"], "pretrain.weights")
            )
        if "policy" in data:
            pol = dict(_dataclass_from_dict(AugPolicy, data["policy"], "pretrain.policy"))
            for key in ("crop_scale", "crop_aspect", "out_size"):
                if pol.get(key) is not None:
                    pol[key] = tuple(pol[key])
            data["policy"] = AugPolicy(**pol)
        if "encoder" in data:
            data["encoder"] = EncoderSpec(
                **_dataclass_from_dict(EncoderSpec, data["encoder"], "pretrain.encoder")
            )
        cfg = PretrainConfig(**data)
        cfg.validate()
        return cfg


@dataclass
class FinetuneConfig:
    task: str = "classification"
    init: str = "random"  # "random" or a checkpoint path
    probe_epochs: int = 20
    probe_lr: float = 1e-3
    full_epochs: int = 80
    full_lr: float = 1e-5
    batch_size: int = 8
    seed: int = 0
    encoder: Optional[EncoderSpec] = None  # required for init="random"

    def validate(self) -> None:
        if self.task not in ("classification", "segmentation"):
            raise ValueError(
                f"task must be classification or segmentation, got {self.task!r}"
            )
        for name, v in (
            ("probe_epochs", self.probe_epochs),
            ("full_epochs", self.full_epochs),
        ):
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.probe_lr <= 0 or self.full_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.init == "random" and self.encoder is None:
            raise ValueError("init='random' requires an encoder spec")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(payload: dict) -> "FinetuneConfig":
        data = dict(_dataclass_from_dict(FinetuneConfig, payload, "finetune config"))
        if data.get("encoder") is not None:
            data["encoder"] = EncoderSpec(
                **_dataclass_from_dict(EncoderSpec, data["encoder"], "finetune.encoder")
            )
        cfg = FinetuneConfig(**data)
        cfg.validate()
        return cfg


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# --------------------------------------------------------------------------
# pre-training model
# --------------------------------------------------------------------------

class PretrainModel(nn.Module):
    """Encoder plus the auxiliary heads a method needs. Every component is
    initialized from its own (seed, component) stream, so shared components
    start identical across methods."""

    def __init__(self, cfg: PretrainConfig, elev_shape: tuple[int, int]):
        super().__init__()
        spec = cfg.encoder
        self.method = cfg.method
        self.encoder = ResidualEncoder(spec)
        seeded_init(self.encoder, cfg.seed, "encoder")
        c1 = spec.stage_widths[0]
        c4 = spec.stage_widths[3]
        if cfg.method in ("simclr", "simclr_elev"):
            self.proj_contrast = ProjectionHead(ProjectionHeadSpec(in_dim=c4))
            seeded_init(self.proj_contrast, cfg.seed, "proj_contrast")
        if cfg.method in ("glcnet", "glcnet_elev"):
            self.proj_global = ProjectionHead(ProjectionHeadSpec(in_dim=2 * c4))
            seeded_init(self.proj_global, cfg.seed, "proj_global")
            self.local_decoder = make_local_decoder(spec)
            seeded_init(self.local_decoder, cfg.seed, "local_decoder")
            self.proj_local = ProjectionHead(ProjectionHeadSpec(in_dim=c1))
            seeded_init(self.proj_local, cfg.seed, "proj_local")
        if cfg.method in ("elevation", "simclr_elev", "glcnet_elev"):
            self.elev_decoder = make_elevation_decoder(spec, elev_shape)
            seeded_init(self.elev_decoder, cfg.seed, "elev_decoder")


def _branch_weights(cfg: PretrainConfig) -> tuple[float, float]:
    """(contrastive weight, elevation weight) actually applied by the method."""
    alpha = cfg.weights.alpha
    if cfg.method == "elevation":
        return 0.0, 1.0
    if cfg.method in ("simclr", "glcnet"):
        return 1.0, 0.0
    return 1.0 - alpha, alpha


def _no_crop(policy: AugPolicy) -> AugPolicy:
    return dataclasses.replace(policy, crop_scale=(1.0, 1.0), crop_aspect=(1.0, 1.0))


@dataclass
class _Batch:
    view_a: Optional[torch.Tensor]
    view_b: Optional[torch.Tensor]
    view_e: Optional[torch.Tensor]
    elev_target: Optional[torch.Tensor]
    pairs: Optional[list]


def _full_crop(spec: AugSpec, src_shape: tuple[int, int]) -> AugSpec:
    return dataclasses.replace(spec, crop_box=(0, 0, src_shape[0], src_shape[1]))


def _assemble_batch(
    cfg: PretrainConfig,
    tiles: list,
    ds_indices: Sequence[int],
    epoch: int,
    stats: ElevationStats,
    feat_shape: tuple[int, int],
    need_contrast: bool,
    need_elev: bool,
) -> _Batch:
    policy = cfg.policy
    elev_policy = policy if cfg.crop_elev_view else _no_crop(policy)
    need_regions = need_contrast and cfg.method in ("glcnet", "glcnet_elev")
    need_local = need_regions and cfg.weights.lam < 1.0

    views_a, views_b, views_e, targets, pairs_all = [], [], [], [], []
    for tile, ds_index in zip(tiles, ds_indices):
        rng = derive_rng(cfg.seed, "aug", epoch, ds_index)
        src_shape = (int(tile.rgb.shape[1]), int(tile.rgb.shape[2]))
        spec_a = sample_aug_spec(src_shape, policy, rng)
        spec_b = sample_aug_spec(src_shape, policy, rng)
        spec_e = sample_aug_spec(src_shape, elev_policy, rng)

        if need_local:
            pairs = None
            for _ in range(MAX_OVERLAP_RETRIES):
                try:
                    pairs = matched_regions(
                        spec_a, spec_b, cfg.n_regions, cfg.patch, feat_shape, rng
                    )
                    break
                except OverlapTooSmall:
                    spec_a = sample_aug_spec(src_shape, policy, rng)
                    spec_b = sample_aug_spec(src_shape, policy, rng)
            if pairs is None:
                spec_a = _full_crop(spec_a, src_shape)
                spec_b = _full_crop(spec_b, src_shape)
                pairs = matched_regions(
                    spec_a, spec_b, cfg.n_regions, cfg.patch, feat_shape, rng
                )
            pairs_all.append(pairs)

        if need_contrast:
            views_a.append(apply_spec(tile.rgb, spec_a))
            views_b.append(apply_spec(tile.rgb, spec_b))
        if need_elev:
            views_e.append(apply_spec(tile.rgb, spec_e))
            targets.append(
                normalize_elevation(
                    apply_spec_to_elevation(tile.elevation, spec_e, src_shape), stats
                )
            )

    return _Batch(
        view_a=torch.stack(views_a) if views_a else None,
        view_b=torch.stack(views_b) if views_b else None,
        view_e=torch.stack(views_e) if views_e else None,
        elev_target=torch.stack(targets) if targets else None,
        pairs=pairs_all if pairs_all else None,
    )


def _forward_batch(
    model: PretrainModel, cfg: PretrainConfig, batch: _Batch
) -> tuple[torch.Tensor, LossBreakdown]:
    weights = cfg.weights
    c_weight, e_weight = _branch_weights(cfg)
    run_contrast = c_weight > 0.0
    run_elev = e_weight > 0.0

    contrast = None
    global_part = None
    local_part = None
    if run_contrast:
        pyr_a = model.encoder(batch.view_a)
        pyr_b = model.encoder(batch.view_b)
        if cfg.method in ("simclr", "simclr_elev"):
            za = model.proj_contrast(pyr_a.pooled)
            zb = model.proj_contrast(pyr_b.pooled)
            contrast = nt_xent(za, zb, weights.tau)
        else:
            if weights.lam > 0.0:
                ga = model.proj_global(style_features(pyr_a.f4))
                gb = model.proj_global(style_features(pyr_b.f4))
                global_part = nt_xent(ga, gb, weights.tau)
            if weights.lam < 1.0:
                la = model.local_decoder(pyr_a)
                lb = model.local_decoder(pyr_b)
                local_part = local_matching_loss(
                    la, lb, batch.pairs, model.proj_local, weights.tau
                )
            contrast = glcnet_combine(global_part, local_part, weights.lam)

    elevation = None
    if run_elev:
        pyr_e = model.encoder(batch.view_e)
        pred = model.elev_decoder(pyr_e)[:, 0]
        elevation = elevation_loss(pred, batch.elev_target, cfg.elev_mode)

    if run_contrast and run_elev:
        total = combined_loss(contrast, elevation, weights.alpha)
    elif run_contrast:
        total = contrast
    else:
        total = elevation

    breakdown = LossBreakdown(
        total=float(total.detach()),
        contrastive=float(contrast.detach()) if contrast is not None else None,
        elevation=float(elevation.detach()) if elevation is not None else None,
        global_part=float(global_part.detach()) if global_part is not None else None,
        local_part=float(local_part.detach()) if local_part is not None else None,
    )
    return total, breakdown


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def pretrain(
    cfg: PretrainConfig,
    manifest: DatasetManifest,
    split: SplitAssignment,
    out_path: Path,
) -> tuple[Path, list[dict]]:
    """Run one pre-training method and save the encoder-only checkpoint.

    Returns the checkpoint path and the training log (also written as JSON
    Lines alongside the checkpoint). The checkpoint keeps metadata needed
    downstream: encoder spec, elevation statistics, method, seed, hashes.
    """
    cfg.validate()
    if not split.pretrain_ids:
        raise ValueError("pretrain split is empty")
    n = len(split.pretrain_ids)
    steps_per_epoch = n // cfg.batch_size  # incomplete final batch dropped
    if steps_per_epoch < 1:
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds the {n}-tile pretrain split"
        )
    th, tw = manifest.tile_shape
    if cfg.method in ("glcnet", "glcnet_elev") and min(th, tw) < cfg.patch:
        raise ValueError(
            f"matching patch {cfg.patch} exceeds the {th}x{tw} tile size"
        )

    stats = compute_elevation_stats(manifest, split.pretrain_ids)
    model = PretrainModel(cfg, manifest.elev_shape)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay
    )

    out_hw = cfg.policy.out_size or manifest.tile_shape
    feat_shape = (_ceil_div(out_hw[0], 4), _ceil_div(out_hw[1], 4))
    c_weight, e_weight = _branch_weights(cfg)
    need_contrast = c_weight > 0.0
    need_elev = e_weight > 0.0

    tiles = {}
    total_steps = cfg.epochs * steps_per_epoch
    global_step = 0
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "order", epoch).permutation(n)
        for b in range(steps_per_epoch):
            ds_indices = [int(i) for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            batch_tiles = []
            for i in ds_indices:
                tid = split.pretrain_ids[i]
                if tid not in tiles:
                    tiles[tid] = load_tile(manifest, tid)
                batch_tiles.append(tiles[tid])
            batch = _assemble_batch(
                cfg, batch_tiles, ds_indices, epoch, stats, feat_shape,
                need_contrast, need_elev,
            )
            total, breakdown = _forward_batch(model, cfg, batch)
            if not math.isfinite(breakdown.total):
                raise RuntimeError(
                    f"nonfinite loss at step {global_step} (epoch {epoch}): "
                    f"{breakdown.to_dict()}"
                )
            lr = cosine_lr(global_step, total_steps, cfg.lr0)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            record = {"step": global_step, "epoch": epoch, "lr": lr}
            record.update(breakdown.to_dict())
            log.append(record)
            global_step += 1

    out_path = Path(out_path)
    cfg_dict = cfg.to_dict()
    meta = {
        "kind": "encoder",
        "method": cfg.method,
        "seed": cfg.seed,
        "epoch": cfg.epochs,
        "encoder_spec": cfg.encoder.to_dict(),
        "elev_shape": list(manifest.elev_shape),
        "elev_stats": {"mean": stats.mean, "std": stats.std},
        "config_hash": config_hash(cfg_dict),
        "arch_hash": config_hash({"encoder": cfg.encoder.to_dict()}),
    }
    save_archive(out_path, meta, collect_state(model.encoder))
    log_path = out_path.parent / (out_path.stem + "_log.jsonl")
    with open(log_path, "w") as fh:
        for record in log:
            fh.write(json.dumps(record) + "\n")
    return out_path, log


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------

class FinetuneModel(nn.Module):
    def __init__(self, spec: EncoderSpec, task: str, seed: int):
        super().__init__()
        self.spec = spec
        self.task = task
        self.encoder = ResidualEncoder(spec)
        seeded_init(self.encoder, seed, "encoder")
        if task == "classification":
            self.head = ClassifierHead(spec.embedding_dim)
            seeded_init(self.head, seed, "cls_head")
        else:
            self.head = make_segmentation_decoder(spec)
            seeded_init(self.head, seed, "seg_decoder")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        pyramid = self.encoder(images)
        if self.task == "classification":
            return self.head(pyramid.pooled)
        return self.head(pyramid)


def model_arch_hash(spec: EncoderSpec, task: str) -> str:
    return config_hash({"encoder": spec.to_dict(), "task": task})


def build_finetune_model(cfg: FinetuneConfig) -> tuple[FinetuneModel, dict]:
    """Construct the downstream model; returns (model, provenance meta)."""
    cfg.validate()
    if cfg.init == "random":
        model = FinetuneModel(cfg.encoder, cfg.task, cfg.seed)
        return model, {"init": "random"}
    meta, tensors = load_archive(Path(cfg.init))
    if meta.get("kind") != "encoder":
        raise ValueError(f"{cfg.init}: not an encoder checkpoint")
    spec = EncoderSpec(**meta["encoder_spec"])
    if cfg.encoder is not None and cfg.encoder != spec:
        raise ValueError(
            f"configured encoder spec {cfg.encoder} does not match "
            f"checkpoint spec {spec}"
        )
    model = FinetuneModel(spec, cfg.task, cfg.seed)
    load_state_into(model.encoder, tensors)
    provenance = {
        "init": str(cfg.init),
        "pretrain_method": meta.get("method"),
        "pretrain_config_hash": meta.get("config_hash"),
    }
    return model, provenance


def _joint_flip(rgb: torch.Tensor, mask: torch.Tensor, rng: np.random.Generator):
    if rng.random() < 0.5:
        rgb = torch.flip(rgb, dims=[2])
        mask = torch.flip(mask, dims=[1])
    if rng.random() < 0.5:
        rgb = torch.flip(rgb, dims=[1])
        mask = torch.flip(mask, dims=[0])
    return rgb, mask


def finetune(
    cfg: FinetuneConfig,
    manifest: DatasetManifest,
    labeled_ids: Sequence[str],
) -> tuple[FinetuneModel, list[dict]]:
    """Two-phase protocol: linear/decoder probe with a frozen encoder
    (parameters and batch-norm statistics immutable), then full fine-tuning.
    Cross-entropy loss; pixel-mean for segmentation. Segmentation applies
    joint image+mask flips in both phases; classification trains unaugmented.
    """
    cfg.validate()
    ids = list(labeled_ids)
    if not ids:
        raise ValueError("finetune needs at least one labeled tile")
    samples = [load_tile(manifest, tid) for tid in ids]
    if cfg.task == "classification":
        for s in samples:
            if s.label is None:
                raise ValueError(f"tile {s.id!r} is not pure: unusable for classification")

    model, _ = build_finetune_model(cfg)
    log: list[dict] = []
    step = 0

    def run_phase(phase: str, epochs: int, lr: float, params) -> None:
        nonlocal step
        if epochs == 0:
            return
        optimizer = torch.optim.Adam(params, lr=lr)
        for epoch in range(epochs):
            if phase == "probe":
                model.encoder.eval()
                model.head.train()
            else:
                model.train()
            order = derive_rng(cfg.seed, "ft-order", phase, epoch).permutation(len(samples))
            for start in range(0, len(order), cfg.batch_size):
                chunk = [int(i) for i in order[start : start + cfg.batch_size]]
                images, targets = [], []
                for i in chunk:
                    s = samples[i]
                    if cfg.task == "segmentation":
                        rng = derive_rng(cfg.seed, "ft-aug", phase, epoch, i)
                        rgb, mask = _joint_flip(s.rgb, s.mask, rng)
                        images.append(rgb)
                        targets.append(mask)
                    else:
                        images.append(s.rgb)
                        targets.append(s.label)
                x = torch.stack(images)
                if cfg.task == "segmentation":
                    y = torch.stack(targets)
                else:
                    y = torch.tensor(targets, dtype=torch.int64)
                logits = model(x)
                loss = F.cross_entropy(logits, y)
                if not math.isfinite(float(loss.detach())):
                    raise RuntimeError(f"nonfinite loss at {phase} step {step}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                log.append(
                    {
                        "phase": phase,
                        "epoch": epoch,
                        "step": step,
                        "lr": lr,
                        "loss": float(loss.detach()),
                    }
                )
                step += 1

    # Phase 1: frozen encoder, head only.
    model.encoder.requires_grad_(False)
    run_phase("probe", cfg.probe_epochs, cfg.probe_lr, model.head.parameters())
    # Phase 2: everything trains.
    model.encoder.requires_grad_(True)
    run_phase("full", cfg.full_epochs, cfg.full_lr, model.parameters())
    model.eval()
    return model, log


def save_model(model: FinetuneModel, path: Path, extra_meta: Optional[dict] = None) -> None:
    meta = {
        "kind": "classifier" if model.task == "classification" else "segmenter",
        "task": model.task,
        "encoder_spec": model.spec.to_dict(),
        "arch_hash": model_arch_hash(model.spec, model.task),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_archive(path, meta, collect_state(model))


def load_model(path: Path) -> tuple[FinetuneModel, dict]:
    meta, tensors = load_archive(Path(path))
    if meta.get("kind") not in ("classifier", "segmenter"):
        raise ValueError(f"{path}: not a downstream model archive")
    spec = EncoderSpec(**meta["encoder_spec"])
    task = meta["task"]
    expected = model_arch_hash(spec, task)
    if meta.get("arch_hash") != expected:
        raise ValueError(
            f"{path}: architecture hash mismatch "
            f"(declared {meta.get('arch_hash')}, derived {expected})"
        )
    model = FinetuneModel(spec, task, seed=0)
    load_state_into(model, tensors)
    model.eval()
    return model, meta
