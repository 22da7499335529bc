import dataclasses
import hashlib
import json
import math

import numpy as np
import pytest
import torch

from elevssl.checkpoint import load_archive
from elevssl.data import SplitAssignment, load_tile, split_dataset
from elevssl.losses import LossBreakdown, LossWeights
from elevssl.models import EncoderSpec
from elevssl.synthetic import SynthConfig, generate_synthetic
from elevssl.training import (
    FinetuneConfig,
    FinetuneModel,
    PretrainConfig,
    PretrainModel,
    _assemble_batch,
    _branch_weights,
    _forward_batch,
    build_finetune_model,
    cosine_lr,
    finetune,
    load_model,
    model_arch_hash,
    pretrain,
    save_model,
)


def _tiny_cfg(method, **overrides):
    base = dict(
        method=method,
        epochs=1,
        batch_size=8,
        seed=0,
        encoder=EncoderSpec.tiny(),
    )
    base.update(overrides)
    return PretrainConfig(**base)


@pytest.fixture(scope="module")
def split16(tiny_manifest):
    # 24 tiles -> 16 pretrain / 4 finetune / 4 test
    return split_dataset(tiny_manifest, eval_pool=8, finetune_size=4, seed=0)


@pytest.fixture(scope="module")
def manifest64(tmp_path_factory):
    root = tmp_path_factory.mktemp("data64")
    cfg = SynthConfig(
        n_tiles=64,
        seed=7,
        coupling=0.9,
        tile_shape=(64, 64),
        elev_shape=(21, 21),
        pure_fraction=0.35,
    )
    return generate_synthetic(cfg, root)


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------

def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 0.001) == pytest.approx(0.001)
    assert cosine_lr(100, 100, 0.001) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(50, 100, 0.001) == pytest.approx(0.0005)
    with pytest.raises(ValueError, match="outside"):
        cosine_lr(101, 100, 0.001)
    with pytest.raises(ValueError, match="outside"):
        cosine_lr(-1, 100, 0.001)


def test_cosine_lr_monotone_decreasing():
    values = [cosine_lr(s, 40, 1.0) for s in range(41)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def test_pretrain_config_validation():
    with pytest.raises(ValueError, match="method"):
        _tiny_cfg("masked_autoencoder").validate()
    with pytest.raises(ValueError, match="batch_size >= 2"):
        _tiny_cfg("simclr", batch_size=1).validate()
    # elevation-only is non-contrastive: batch of one is allowed
    _tiny_cfg("elevation", batch_size=1).validate()
    with pytest.raises(ValueError, match="epochs"):
        _tiny_cfg("simclr", epochs=0).validate()
    with pytest.raises(ValueError, match="elev_mode"):
        _tiny_cfg("elevation", elev_mode="rmse").validate()


def test_pretrain_config_from_dict_rejects_unknown_fields():
    with pytest.raises(ValueError, match="momentum"):
        PretrainConfig.from_dict({"method": "simclr", "momentum": 0.9})
    with pytest.raises(ValueError, match="pretrain.weights"):
        PretrainConfig.from_dict({"method": "simclr", "weights": {"beta": 1.0}})


def test_pretrain_config_from_dict_round_trip():
    cfg = _tiny_cfg("glcnet_elev", weights=LossWeights(tau=0.4, alpha=0.7, lam=0.2))
    back = PretrainConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_finetune_config_validation():
    with pytest.raises(ValueError, match="task"):
        FinetuneConfig(task="detection").validate()
    with pytest.raises(ValueError, match="encoder spec"):
        FinetuneConfig(task="classification", init="random").validate()
    FinetuneConfig(task="classification", init="random", encoder=EncoderSpec.tiny()).validate()
    with pytest.raises(ValueError, match="probe_epochs"):
        FinetuneConfig(
            task="classification", init="x.ckpt", probe_epochs=-1
        ).validate()


def test_branch_weights_dispatch():
    assert _branch_weights(_tiny_cfg("elevation")) == (0.0, 1.0)
    assert _branch_weights(_tiny_cfg("simclr")) == (1.0, 0.0)
    assert _branch_weights(_tiny_cfg("glcnet")) == (1.0, 0.0)
    cfg = _tiny_cfg("simclr_elev", weights=LossWeights(alpha=0.25))
    assert _branch_weights(cfg) == (0.75, 0.25)


# --------------------------------------------------------------------------
# model construction
# --------------------------------------------------------------------------

def test_encoder_init_identical_across_methods():
    ref = None
    for method in ("simclr", "glcnet", "elevation", "simclr_elev", "glcnet_elev"):
        model = PretrainModel(_tiny_cfg(method), elev_shape=(21, 21))
        state = {k: v.clone() for k, v in model.encoder.state_dict().items()}
        if ref is None:
            ref = state
        else:
            for key in ref:
                assert torch.equal(ref[key], state[key]), (method, key)
    # the downstream model shares the same seeded encoder stream
    ft = FinetuneModel(EncoderSpec.tiny(), "classification", seed=0)
    for key in ref:
        assert torch.equal(ref[key], ft.encoder.state_dict()[key]), key


def test_method_specific_heads_exist():
    m = PretrainModel(_tiny_cfg("simclr"), elev_shape=(21, 21))
    assert hasattr(m, "proj_contrast") and not hasattr(m, "elev_decoder")
    m = PretrainModel(_tiny_cfg("glcnet"), elev_shape=(21, 21))
    assert hasattr(m, "proj_global") and hasattr(m, "local_decoder")
    m = PretrainModel(_tiny_cfg("elevation"), elev_shape=(21, 21))
    assert hasattr(m, "elev_decoder") and not hasattr(m, "proj_contrast")
    m = PretrainModel(_tiny_cfg("glcnet_elev"), elev_shape=(21, 21))
    assert hasattr(m, "elev_decoder") and hasattr(m, "proj_local")


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------

@pytest.mark.parametrize(
    "method", ["simclr", "glcnet", "elevation", "simclr_elev", "glcnet_elev"]
)
def test_all_methods_run_and_checkpoint(method, tiny_manifest, split16, tmp_path):
    cfg = _tiny_cfg(method)
    path, log = pretrain(cfg, tiny_manifest, split16, tmp_path / f"{method}.ckpt")
    assert path.exists()
    assert len(log) == 2  # 16 tiles / batch 8, last partial dropped
    meta, tensors = load_archive(path)
    assert meta["kind"] == "encoder"
    assert meta["method"] == method
    assert meta["elev_stats"]["std"] > 0
    assert meta["encoder_spec"]["stage_widths"] == [8, 16, 32, 64]
    # encoder-only archive: no head tensors
    assert all(not k.startswith(("proj", "head", "elev")) for k in tensors)
    # log structure and per-method breakdown fields
    for record in log:
        assert math.isfinite(record["total"])
        assert record["lr"] <= cfg.lr0
    first = log[0]
    if method == "simclr":
        assert first["contrastive"] is not None and first["elevation"] is None
    elif method == "elevation":
        assert first["elevation"] is not None and first["contrastive"] is None
    elif method == "simclr_elev":
        assert first["contrastive"] is not None and first["elevation"] is not None
    elif method == "glcnet":
        assert first["global_part"] is not None and first["local_part"] is not None
        assert first["elevation"] is None
    else:  # glcnet_elev
        assert first["global_part"] is not None and first["elevation"] is not None
    log_path = path.parent / f"{method}_log.jsonl"
    assert log_path.exists()
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert lines == log


def test_pretrain_is_bit_deterministic(tiny_manifest, split16, tmp_path):
    cfg = _tiny_cfg("simclr_elev", epochs=2)
    p1, log1 = pretrain(cfg, tiny_manifest, split16, tmp_path / "run1.ckpt")
    cfg2 = _tiny_cfg("simclr_elev", epochs=2)
    p2, log2 = pretrain(cfg2, tiny_manifest, split16, tmp_path / "run2.ckpt")
    assert log1 == log2  # exact float equality of the loss trajectory
    assert hashlib.sha256(p1.read_bytes()).hexdigest() == hashlib.sha256(
        p2.read_bytes()
    ).hexdigest()


def test_alpha_boundaries_reduce_to_pure_methods(tiny_manifest, split16, tmp_path):
    # alpha=1: the combined method's encoder must train bit-identically to
    # the pure elevation method; alpha=0 reduces to plain SimCLR likewise
    p_elev, _ = pretrain(
        _tiny_cfg("elevation"), tiny_manifest, split16, tmp_path / "elev.ckpt"
    )
    p_a1, _ = pretrain(
        _tiny_cfg("simclr_elev", weights=LossWeights(alpha=1.0)),
        tiny_manifest,
        split16,
        tmp_path / "a1.ckpt",
    )
    _, t_elev = load_archive(p_elev)
    _, t_a1 = load_archive(p_a1)
    assert set(t_elev) == set(t_a1)
    for key in t_elev:
        assert torch.equal(t_elev[key], t_a1[key]), key

    p_simclr, _ = pretrain(
        _tiny_cfg("simclr"), tiny_manifest, split16, tmp_path / "simclr.ckpt"
    )
    p_a0, _ = pretrain(
        _tiny_cfg("simclr_elev", weights=LossWeights(alpha=0.0)),
        tiny_manifest,
        split16,
        tmp_path / "a0.ckpt",
    )
    _, t_simclr = load_archive(p_simclr)
    _, t_a0 = load_archive(p_a0)
    for key in t_simclr:
        assert torch.equal(t_simclr[key], t_a0[key]), key


def test_glcnet_alpha_boundary(tiny_manifest, split16, tmp_path):
    p_glcnet, _ = pretrain(
        _tiny_cfg("glcnet"), tiny_manifest, split16, tmp_path / "glcnet.ckpt"
    )
    p_a0, _ = pretrain(
        _tiny_cfg("glcnet_elev", weights=LossWeights(alpha=0.0)),
        tiny_manifest,
        split16,
        tmp_path / "ga0.ckpt",
    )
    _, t_glcnet = load_archive(p_glcnet)
    _, t_a0 = load_archive(p_a0)
    for key in t_glcnet:
        assert torch.equal(t_glcnet[key], t_a0[key]), key


def test_alpha_linearity_of_gradients(tiny_manifest, split16):
    # combined-loss gradient == alpha * grad(elev) + (1-alpha) * grad(contrast)
    alpha = 0.3
    cfg = _tiny_cfg("simclr_elev", weights=LossWeights(alpha=alpha))
    model = PretrainModel(cfg, tiny_manifest.elev_shape).double()
    model.eval()  # frozen batch-norm statistics keep the three passes aligned

    from elevssl.data import compute_elevation_stats

    stats = compute_elevation_stats(tiny_manifest, split16.pretrain_ids)
    tiles = [load_tile(tiny_manifest, t) for t in split16.pretrain_ids[:4]]
    batch = _assemble_batch(
        cfg, tiles, [0, 1, 2, 3], epoch=0, stats=stats,
        feat_shape=(16, 16), need_contrast=True, need_elev=True,
    )
    batch.view_a = batch.view_a.double()
    batch.view_b = batch.view_b.double()
    batch.view_e = batch.view_e.double()
    batch.elev_target = batch.elev_target.double()

    def grads_for(alpha_value):
        model.zero_grad(set_to_none=True)
        cfg_v = _tiny_cfg("simclr_elev", weights=LossWeights(alpha=alpha_value))
        total, _ = _forward_batch(model, cfg_v, batch)
        total.backward()
        return {
            name: (p.grad.clone() if p.grad is not None else None)
            for name, p in model.named_parameters()
        }

    g_combined = grads_for(alpha)
    g_elev = grads_for(1.0)
    g_contrast = grads_for(0.0)
    checked = 0
    for name, g in g_combined.items():
        ge = g_elev[name]
        gc = g_contrast[name]
        if g is None:
            continue
        expected = torch.zeros_like(g)
        if ge is not None:
            expected = expected + alpha * ge
        if gc is not None:
            expected = expected + (1.0 - alpha) * gc
        denom = expected.abs().max().clamp_min(1e-12)
        assert float((g - expected).abs().max() / denom) < 1e-6, name
        checked += 1
    assert checked > 20


def test_loss_decreases_over_two_epochs(manifest64, tmp_path):
    split = SplitAssignment(
        pretrain_ids=manifest64.ids(), finetune_ids=[], test_ids=[], seed=0
    )
    cfg = _tiny_cfg("simclr_elev", epochs=2, batch_size=16)
    _, log = pretrain(cfg, manifest64, split, tmp_path / "two_epoch.ckpt")
    by_epoch = {}
    for record in log:
        by_epoch.setdefault(record["epoch"], []).append(record["total"])
    first = float(np.mean(by_epoch[0]))
    last = float(np.mean(by_epoch[1]))
    assert last < first


def test_schedule_boundary_in_log(tiny_manifest, split16, tmp_path):
    cfg = _tiny_cfg("elevation", epochs=25)  # 50 steps total
    _, log = pretrain(cfg, tiny_manifest, split16, tmp_path / "sched.ckpt")
    assert log[-1]["lr"] < 1e-3 * cfg.lr0


def test_pretrain_rejects_oversized_batch(tiny_manifest, split16, tmp_path):
    cfg = _tiny_cfg("simclr", batch_size=64)
    with pytest.raises(ValueError, match="batch_size"):
        pretrain(cfg, tiny_manifest, split16, tmp_path / "x.ckpt")


def test_pretrain_rejects_patch_larger_than_tile(tiny_manifest, split16, tmp_path):
    cfg = _tiny_cfg("glcnet", patch=100)
    with pytest.raises(ValueError, match="patch"):
        pretrain(cfg, tiny_manifest, split16, tmp_path / "x.ckpt")


def test_pretrain_aborts_on_nonfinite_loss(
    tiny_manifest, split16, tmp_path, monkeypatch
):
    import elevssl.training as training_mod

    def bad_forward(model, cfg, batch):
        total = torch.tensor(float("nan"), requires_grad=True)
        return total, LossBreakdown(total=float("nan"))

    monkeypatch.setattr(training_mod, "_forward_batch", bad_forward)
    with pytest.raises(RuntimeError, match="nonfinite loss at step 0"):
        pretrain(
            _tiny_cfg("elevation"), tiny_manifest, split16, tmp_path / "x.ckpt"
        )


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def seg_checkpoint(tiny_manifest, split16, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "enc.ckpt"
    path, _ = pretrain(_tiny_cfg("glcnet_elev"), tiny_manifest, split16, out)
    return path


def test_probe_phase_freezes_encoder(tiny_manifest, split16, seg_checkpoint):
    cfg = FinetuneConfig(
        task="segmentation",
        init=str(seg_checkpoint),
        probe_epochs=1,
        full_epochs=0,
        seed=0,
    )
    model, log = finetune(cfg, tiny_manifest, split16.finetune_ids)
    _, archived = load_archive(seg_checkpoint)
    encoder_state = model.encoder.state_dict()
    for name, value in archived.items():
        assert torch.equal(encoder_state[name], value), name
    assert all(r["phase"] == "probe" for r in log)
    assert len(log) == 1  # 4 tiles, batch 8, partial batch kept


def test_full_phase_unfreezes_encoder(tiny_manifest, split16, seg_checkpoint):
    cfg = FinetuneConfig(
        task="segmentation",
        init=str(seg_checkpoint),
        probe_epochs=1,
        full_epochs=1,
        full_lr=1e-3,  # large enough to observe a change
        seed=0,
    )
    model, log = finetune(cfg, tiny_manifest, split16.finetune_ids)
    _, archived = load_archive(seg_checkpoint)
    changed = any(
        not torch.equal(model.encoder.state_dict()[name], value)
        for name, value in archived.items()
    )
    assert changed
    assert {r["phase"] for r in log} == {"probe", "full"}


def test_finetune_is_deterministic(tiny_manifest, split16, seg_checkpoint):
    cfg = FinetuneConfig(
        task="segmentation", init=str(seg_checkpoint), probe_epochs=2, full_epochs=1, seed=3
    )
    m1, log1 = finetune(cfg, tiny_manifest, split16.finetune_ids)
    m2, log2 = finetune(cfg, tiny_manifest, split16.finetune_ids)
    assert log1 == log2
    for (n1, p1), (n2, p2) in zip(
        m1.state_dict().items(), m2.state_dict().items()
    ):
        assert n1 == n2
        assert torch.equal(p1, p2), n1


def test_random_init_runs_without_checkpoint(tiny_manifest, split16):
    cfg = FinetuneConfig(
        task="segmentation",
        init="random",
        encoder=EncoderSpec.tiny(),
        probe_epochs=1,
        full_epochs=0,
        seed=0,
    )
    model, log = finetune(cfg, tiny_manifest, split16.finetune_ids)
    assert model.task == "segmentation"
    assert log


def test_classification_requires_pure_tiles(tiny_manifest, split16, seg_checkpoint):
    mixed = [
        tid
        for tid in tiny_manifest.ids()
        if load_tile(tiny_manifest, tid).label is None
    ]
    cfg = FinetuneConfig(
        task="classification", init=str(seg_checkpoint), probe_epochs=1, full_epochs=0
    )
    with pytest.raises(ValueError, match="not pure"):
        finetune(cfg, tiny_manifest, mixed[:3])


def test_classification_trains_on_pure_tiles(tiny_manifest, seg_checkpoint):
    from elevssl.data import derive_classification_set

    labeled = derive_classification_set(tiny_manifest, tiny_manifest.ids())
    ids = [tid for tid, _ in labeled][:6]
    cfg = FinetuneConfig(
        task="classification", init=str(seg_checkpoint), probe_epochs=1, full_epochs=0
    )
    model, log = finetune(cfg, tiny_manifest, ids)
    with torch.no_grad():
        logits = model(torch.stack([load_tile(tiny_manifest, ids[0]).rgb]))
    assert logits.shape == (1, 2)


def test_finetune_rejects_empty_set(tiny_manifest, seg_checkpoint):
    cfg = FinetuneConfig(task="segmentation", init=str(seg_checkpoint))
    with pytest.raises(ValueError, match="at least one"):
        finetune(cfg, tiny_manifest, [])


def test_finetune_rejects_mismatched_encoder_spec(seg_checkpoint):
    cfg = FinetuneConfig(
        task="segmentation", init=str(seg_checkpoint), encoder=EncoderSpec()
    )
    with pytest.raises(ValueError, match="does not match"):
        build_finetune_model(cfg)


def test_finetune_rejects_non_encoder_checkpoint(tmp_path, tiny_manifest, split16, seg_checkpoint):
    # a downstream model archive is not a valid pretraining checkpoint
    cfg = FinetuneConfig(
        task="segmentation", init=str(seg_checkpoint), probe_epochs=1, full_epochs=0
    )
    model, _ = finetune(cfg, tiny_manifest, split16.finetune_ids)
    model_path = tmp_path / "seg_model.ckpt"
    save_model(model, model_path)
    bad = FinetuneConfig(task="segmentation", init=str(model_path))
    with pytest.raises(ValueError, match="not an encoder checkpoint"):
        build_finetune_model(bad)


def test_downstream_model_round_trip(tiny_manifest, split16, seg_checkpoint, tmp_path):
    cfg = FinetuneConfig(
        task="segmentation", init=str(seg_checkpoint), probe_epochs=1, full_epochs=0
    )
    model, _ = finetune(cfg, tiny_manifest, split16.finetune_ids)
    path = tmp_path / "model.ckpt"
    save_model(model, path, extra_meta={"note": "test"})
    loaded, meta = load_model(path)
    assert meta["kind"] == "segmenter"
    assert meta["note"] == "test"
    assert meta["arch_hash"] == model_arch_hash(model.spec, "segmentation")
    sample = load_tile(tiny_manifest, split16.test_ids[0])
    with torch.no_grad():
        a = model(sample.rgb[None])
        b = loaded(sample.rgb[None])
    assert torch.allclose(a, b, atol=1e-6)


def test_load_model_rejects_tampered_arch_hash(tiny_manifest, split16, seg_checkpoint, tmp_path):
    from elevssl.checkpoint import collect_state, save_archive

    cfg = FinetuneConfig(
        task="segmentation", init=str(seg_checkpoint), probe_epochs=1, full_epochs=0
    )
    model, _ = finetune(cfg, tiny_manifest, split16.finetune_ids)
    path = tmp_path / "tampered.ckpt"
    save_archive(
        path,
        {
            "kind": "segmenter",
            "task": "segmentation",
            "encoder_spec": model.spec.to_dict(),
            "arch_hash": "0" * 64,
        },
        collect_state(model),
    )
    with pytest.raises(ValueError, match="hash mismatch"):
        load_model(path)
