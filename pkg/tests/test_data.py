import numpy as np
import pytest
import torch

from elevssl.data import (
    ElevationStats,
    ManifestError,
    compute_elevation_stats,
    denormalize_elevation,
    derive_classification_set,
    load_manifest,
    load_split,
    load_tile,
    normalize_elevation,
    read_elevation,
    read_elevation_shape,
    save_manifest,
    save_split,
    split_dataset,
    write_elevation,
)


# --------------------------------------------------------------------------
# raster IO
# --------------------------------------------------------------------------

def test_elevation_round_trip_bit_exact(tmp_path, rng):
    values = rng.normal(150.0, 40.0, (33, 21)).astype(np.float32)
    path = tmp_path / "elev.bin"
    write_elevation(path, values)
    back = read_elevation(path)
    assert back.dtype == np.float32
    assert back.shape == (33, 21)
    assert np.array_equal(back.view(np.uint32), values.view(np.uint32))


def test_elevation_header_declares_shape(tmp_path):
    path = tmp_path / "e.bin"
    write_elevation(path, np.zeros((7, 5), dtype=np.float32))
    assert read_elevation_shape(path) == (7, 5)


def test_elevation_truncated_header_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x01\x02\x03")
    with pytest.raises(ManifestError, match="truncated"):
        read_elevation(path)


def test_elevation_payload_size_mismatch_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    write_elevation(path, np.zeros((4, 4), dtype=np.float32))
    data = path.read_bytes()
    path.write_bytes(data[:-4])  # drop one float
    with pytest.raises(ManifestError, match="payload"):
        read_elevation(path)


def test_elevation_rejects_non_2d(tmp_path):
    with pytest.raises(ValueError, match="2-D"):
        write_elevation(tmp_path / "x.bin", np.zeros((2, 2, 2), dtype=np.float32))


# --------------------------------------------------------------------------
# manifest loading and validation
# --------------------------------------------------------------------------

def test_manifest_round_trip(tiny_manifest, tmp_path):
    copy_path = tmp_path / "manifest.jsonl"
    # re-save against the original root, then reload
    save_manifest(tiny_manifest, tiny_manifest.root / "copy.jsonl")
    again = load_manifest(tiny_manifest.root / "copy.jsonl")
    assert again.ids() == tiny_manifest.ids()
    assert again.tile_shape == tiny_manifest.tile_shape
    assert again.elev_shape == tiny_manifest.elev_shape
    assert again.class_names == tiny_manifest.class_names
    assert not copy_path.exists()  # sanity: nothing stray written to tmp_path


def test_manifest_missing_file_raises(tiny_manifest, tmp_path):
    text = (tiny_manifest.root / "manifest.jsonl").read_text()
    broken_root = tmp_path / "broken"
    broken_root.mkdir()
    (broken_root / "manifest.jsonl").write_text(text)
    with pytest.raises(FileNotFoundError, match="missing tile file"):
        load_manifest(broken_root / "manifest.jsonl")


def test_manifest_corrupted_elevation_shape_detected(tiny_manifest, tmp_path, rng):
    # clone the dataset directory, then stomp one elevation file with the
    # wrong dimensions
    import shutil

    clone = tmp_path / "clone"
    shutil.copytree(tiny_manifest.root, clone)
    victim = sorted((clone / "tiles").glob("*_elev.bin"))[3]
    write_elevation(victim, rng.normal(0, 1, (5, 5)).astype(np.float32))
    with pytest.raises(ManifestError) as err:
        load_manifest(clone / "manifest.jsonl")
    assert "elevation is 5x5" in str(err.value)
    assert "tile_" in str(err.value)  # names the offending tile


def test_manifest_duplicate_id_rejected(tiny_manifest, tmp_path):
    lines = (tiny_manifest.root / "manifest.jsonl").read_text().splitlines()
    dup = "\n".join(lines + [lines[1]])
    path = tiny_manifest.root / "dup.jsonl"
    path.write_text(dup)
    with pytest.raises(ManifestError, match="duplicate tile id"):
        load_manifest(path)


def test_manifest_unknown_id_lookup(tiny_manifest):
    with pytest.raises(ManifestError, match="unknown tile id"):
        tiny_manifest.entry("nope")


def test_load_tile_shapes_and_types(tiny_manifest):
    sample = load_tile(tiny_manifest, tiny_manifest.ids()[0])
    h, w = tiny_manifest.tile_shape
    eh, ew = tiny_manifest.elev_shape
    assert sample.rgb.shape == (3, h, w)
    assert sample.rgb.dtype == torch.float32
    assert float(sample.rgb.min()) >= 0.0 and float(sample.rgb.max()) <= 1.0
    assert sample.elevation.shape == (eh, ew)
    assert sample.mask.shape == (h, w)
    assert sample.mask.dtype == torch.int64
    assert set(sample.mask.unique().tolist()) <= {0, 1}


def test_load_tile_label_only_for_constant_masks(tiny_manifest):
    seen_pure = seen_mixed = False
    for tid in tiny_manifest.ids():
        sample = load_tile(tiny_manifest, tid)
        constant = bool((sample.mask == sample.mask.flatten()[0]).all())
        if constant:
            assert sample.label == int(sample.mask.flatten()[0])
            seen_pure = True
        else:
            assert sample.label is None
            seen_mixed = True
    assert seen_pure and seen_mixed


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

def test_split_partition_invariant_over_seeds(manifest100):
    all_ids = set(manifest100.ids())
    for seed in range(50):
        split = split_dataset(manifest100, eval_pool=30, finetune_size=10, seed=seed)
        pre, fin, test = (
            set(split.pretrain_ids),
            set(split.finetune_ids),
            set(split.test_ids),
        )
        assert len(split.finetune_ids) == 10
        assert len(split.test_ids) == 20
        assert len(split.pretrain_ids) == 70
        assert pre | fin | test == all_ids
        assert not (pre & fin) and not (pre & test) and not (fin & test)


def test_split_is_seed_deterministic(manifest100):
    a = split_dataset(manifest100, 30, 10, seed=3)
    b = split_dataset(manifest100, 30, 10, seed=3)
    assert a.pretrain_ids == b.pretrain_ids
    assert a.finetune_ids == b.finetune_ids
    assert a.test_ids == b.test_ids
    c = split_dataset(manifest100, 30, 10, seed=4)
    assert c.finetune_ids != a.finetune_ids


def test_split_candidates_restrict_pool(manifest100):
    candidates = manifest100.ids()[:40]
    split = split_dataset(manifest100, 20, 5, seed=0, candidate_ids=candidates)
    pool = set(split.finetune_ids) | set(split.test_ids)
    assert pool <= set(candidates)
    # everything outside the pool (including non-candidates) pre-trains
    assert len(split.pretrain_ids) == 80


def test_split_rejects_oversized_pool(manifest100):
    with pytest.raises(ValueError, match="eval_pool"):
        split_dataset(manifest100, 101, 10, seed=0)
    with pytest.raises(ValueError, match="finetune_size"):
        split_dataset(manifest100, 30, 30, seed=0)


def test_split_rejects_unknown_candidate(manifest100):
    with pytest.raises(ValueError, match="candidate id"):
        split_dataset(manifest100, 10, 2, seed=0, candidate_ids=["ghost"])


def test_split_save_load_round_trip(manifest100, tmp_path):
    split = split_dataset(manifest100, 30, 10, seed=7)
    path = tmp_path / "split.json"
    save_split(split, path)
    back = load_split(path)
    assert back.pretrain_ids == split.pretrain_ids
    assert back.finetune_ids == split.finetune_ids
    assert back.test_ids == split.test_ids
    assert back.seed == 7


# --------------------------------------------------------------------------
# classification derivation
# --------------------------------------------------------------------------

def test_classification_set_only_constant_masks(tiny_manifest):
    labeled = derive_classification_set(tiny_manifest, tiny_manifest.ids())
    assert labeled  # fixture guarantees some pure tiles
    ids = [tid for tid, _ in labeled]
    assert set(ids) <= set(tiny_manifest.ids())
    assert ids == [tid for tid in tiny_manifest.ids() if tid in set(ids)]  # canonical order
    for tid, label in labeled:
        sample = load_tile(tiny_manifest, tid)
        assert bool((sample.mask == label).all())


def test_classification_set_idempotent(tiny_manifest):
    first = derive_classification_set(tiny_manifest, tiny_manifest.ids())
    second = derive_classification_set(tiny_manifest, [tid for tid, _ in first])
    assert second == first


def test_classification_set_unknown_id(tiny_manifest):
    with pytest.raises(ManifestError, match="unknown tile id"):
        derive_classification_set(tiny_manifest, ["missing"])


def test_classification_set_empty_input(tiny_manifest):
    assert derive_classification_set(tiny_manifest, []) == []


# --------------------------------------------------------------------------
# elevation stats
# --------------------------------------------------------------------------

def test_stats_match_numpy_population_values(tiny_manifest):
    ids = tiny_manifest.ids()[:8]
    stats = compute_elevation_stats(tiny_manifest, ids)
    stacked = np.concatenate(
        [read_elevation(tiny_manifest.entry(t).elev_path).ravel() for t in ids]
    ).astype(np.float64)
    assert stats.mean == pytest.approx(stacked.mean(), rel=1e-12)
    assert stats.std == pytest.approx(stacked.std(), rel=1e-9)


def test_stats_constant_field_clamps_std(tmp_path):
    # single constant tile: population std is 0, clamped to a tiny floor
    from elevssl.data import DatasetManifest, ManifestEntry, write_mask, write_rgb

    tiles = tmp_path / "tiles"
    tiles.mkdir()
    write_rgb(tiles / "t_rgb.png", np.full((3, 8, 8), 0.5))
    write_mask(tiles / "t_mask.png", np.zeros((8, 8), dtype=np.uint8))
    write_elevation(tiles / "t_elev.bin", np.full((3, 3), 42.0, dtype=np.float32))
    manifest = DatasetManifest(
        root=tmp_path,
        tile_shape=(8, 8),
        elev_shape=(3, 3),
        entries=[
            ManifestEntry(
                id="t",
                rgb_path=tiles / "t_rgb.png",
                elev_path=tiles / "t_elev.bin",
                mask_path=tiles / "t_mask.png",
            )
        ],
    )
    stats = compute_elevation_stats(manifest, ["t"])
    assert stats.mean == 42.0
    assert stats.std == 1e-6


def test_stats_empty_ids_rejected(tiny_manifest):
    with pytest.raises(ValueError, match="empty"):
        compute_elevation_stats(tiny_manifest, [])


def test_stats_require_positive_std():
    with pytest.raises(ValueError, match="std"):
        ElevationStats(mean=0.0, std=0.0)


def test_normalize_examples():
    stats = ElevationStats(mean=100.0, std=50.0)
    x = torch.full((4, 4), 100.0)
    assert torch.equal(normalize_elevation(x, stats), torch.zeros(4, 4))
    assert normalize_elevation(torch.tensor(200.0), stats).item() == pytest.approx(2.0)


def test_normalize_denormalize_inverse(rng):
    stats = ElevationStats(mean=137.2, std=41.7)
    x64 = torch.from_numpy(rng.normal(150, 60, (33, 33)))
    back64 = denormalize_elevation(normalize_elevation(x64, stats), stats)
    assert torch.allclose(back64, x64, atol=1e-6)
    # float32 round-trips to float32 precision (~1e-5 for 100 m values)
    x32 = x64.float()
    back32 = denormalize_elevation(normalize_elevation(x32, stats), stats)
    assert torch.allclose(back32, x32, atol=1e-3)
