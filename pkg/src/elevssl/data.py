"""Tile data model, on-disk formats, manifest loading, splits, elevation stats.

On-disk layout (all paths in the manifest are relative to its directory):
  manifest.jsonl   first line is a header record declaring tile_shape,
                   elev_shape and class_names; each following line is one
                   entry {"id", "rgb", "elev", "mask"}.
  RGB              8-bit RGB PNG, scaled to [0, 1] on load (divide by 255).
  mask             8-bit grayscale PNG with values {0, 255}; binarized at
                   load with threshold 128 (255 = farmland = class 1).
  elevation        raw binary: two little-endian uint32 (height, width),
                   then height*width little-endian float32, row-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

DEFAULT_CLASS_NAMES = ("other", "farmland")
MASK_THRESHOLD = 128
MIN_ELEV_STD = 1e-6


class ManifestError(ValueError):
    """Manifest or tile file failed validation."""


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    rgb_path: Path
    elev_path: Path
    mask_path: Path


@dataclass
class DatasetManifest:
    root: Path
    tile_shape: tuple[int, int]
    elev_shape: tuple[int, int]
    entries: list[ManifestEntry]
    class_names: tuple[str, str] = DEFAULT_CLASS_NAMES
    _by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.tile_shape = tuple(self.tile_shape)
        self.elev_shape = tuple(self.elev_shape)
        self.class_names = tuple(self.class_names)
        self._by_id = {}
        for entry in self.entries:
            if entry.id in self._by_id:
                raise ManifestError(f"duplicate tile id: {entry.id!r}")
            self._by_id[entry.id] = entry

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        """Tile ids in canonical (entry) order."""
        return [e.id for e in self.entries]

    def entry(self, tile_id: str) -> ManifestEntry:
        try:
            return self._by_id[tile_id]
        except KeyError:
            raise ManifestError(f"unknown tile id: {tile_id!r}") from None

    def index_of(self, tile_id: str) -> int:
        if not hasattr(self, "_index"):
            self._index = {e.id: i for i, e in enumerate(self.entries)}
        return self._index[tile_id]


@dataclass
class TileSample:
    """One geo-tile: RGB reflectances, coarse elevation, binary mask.

    `label` is set only when the mask is constant (a "pure" tile) and then
    equals that constant.
    """

    id: str
    rgb: torch.Tensor          # [3, H, W] float32, values in [0, 1]
    elevation: torch.Tensor    # [He, We] float32, meters
    mask: torch.Tensor         # [H, W] int64, values in {0, 1}
    label: Optional[int] = None


@dataclass
class SplitAssignment:
    pretrain_ids: list[str]
    finetune_ids: list[str]
    test_ids: list[str]
    seed: int


@dataclass(frozen=True)
class ElevationStats:
    """Normalization statistics (meters) computed over the pre-training split."""

    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError(f"std must be positive, got {self.std}")


# --------------------------------------------------------------------------
# raster IO
# --------------------------------------------------------------------------

def write_elevation(path: Path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"elevation raster must be 2-D, got shape {values.shape}")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(values.tobytes())


def read_elevation(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ManifestError(f"truncated elevation header: {path}")
        h, w = struct.unpack("<II", header)
        payload = fh.read()
    if len(payload) != h * w * 4:
        raise ManifestError(
            f"elevation payload of {path} has {len(payload)} bytes, "
            f"expected {h * w * 4} for {h}x{w}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()


def read_elevation_shape(path: Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        header = fh.read(8)
    if len(header) != 8:
        raise ManifestError(f"truncated elevation header: {path}")
    h, w = struct.unpack("<II", header)
    return h, w


def write_rgb(path: Path, rgb: np.ndarray) -> None:
    """Write a [3, H, W] float array in [0, 1] as an 8-bit RGB PNG."""
    arr = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def write_mask(path: Path, mask: np.ndarray) -> None:
    """Write a {0, 1} mask as an 8-bit grayscale PNG with values {0, 255}."""
    arr = (np.asarray(mask).astype(np.uint8) * 255)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def _load_rgb(path: Path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def _load_mask(path: Path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return torch.from_numpy((arr >= MASK_THRESHOLD).astype(np.int64))


# --------------------------------------------------------------------------
# manifest IO
# --------------------------------------------------------------------------

def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    path = Path(path)
    root = path.parent
    with open(path, "w") as fh:
        header = {
            "tile_shape": list(manifest.tile_shape),
            "elev_shape": list(manifest.elev_shape),
            "class_names": list(manifest.class_names),
        }
        fh.write(json.dumps(header) + "\n")
        for entry in manifest.entries:
            record = {
                "id": entry.id,
                "rgb": str(entry.rgb_path.relative_to(root)),
                "elev": str(entry.elev_path.relative_to(root)),
                "mask": str(entry.mask_path.relative_to(root)),
            }
            fh.write(json.dumps(record) + "\n")


def load_manifest(path: Path) -> DatasetManifest:
    """Load and validate a JSON-Lines manifest.

    Every referenced file must exist; RGB/mask/elevation dimensions are
    checked against the header declaration (image headers only, no full
    decode). Raises FileNotFoundError for missing files and ManifestError
    for malformed or mismatched records.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    with open(path) as fh:
        lines = [line for line in (raw.strip() for raw in fh) if line]
    if not lines:
        raise ManifestError(f"manifest is empty (missing header): {path}")
    try:
        header = json.loads(lines[0])
        tile_shape = tuple(int(v) for v in header["tile_shape"])
        elev_shape = tuple(int(v) for v in header["elev_shape"])
        class_names = tuple(header.get("class_names", DEFAULT_CLASS_NAMES))
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"bad manifest header in {path}: {exc}") from exc
    if len(tile_shape) != 2 or len(elev_shape) != 2:
        raise ManifestError(f"tile_shape/elev_shape must be pairs in {path}")

    entries = []
    for line in lines[1:]:
        try:
            rec = json.loads(line)
            entry = ManifestEntry(
                id=str(rec["id"]),
                rgb_path=root / rec["rgb"],
                elev_path=root / rec["elev"],
                mask_path=root / rec["mask"],
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"bad manifest record {line!r}: {exc}") from exc
        entries.append(entry)

    manifest = DatasetManifest(
        root=root,
        tile_shape=tile_shape,
        elev_shape=elev_shape,
        entries=entries,
        class_names=class_names,
    )
    _validate_entries(manifest)
    return manifest


def _validate_entries(manifest: DatasetManifest) -> None:
    th, tw = manifest.tile_shape
    eh, ew = manifest.elev_shape
    for entry in manifest.entries:
        for p in (entry.rgb_path, entry.elev_path, entry.mask_path):
            if not p.exists():
                raise FileNotFoundError(f"missing tile file: {p}")
        with Image.open(entry.rgb_path) as img:
            if img.size != (tw, th):
                raise ManifestError(
                    f"tile {entry.id!r}: rgb is {img.size[1]}x{img.size[0]}, "
                    f"manifest declares {th}x{tw}"
                )
        with Image.open(entry.mask_path) as img:
            if img.size != (tw, th):
                raise ManifestError(
                    f"tile {entry.id!r}: mask is {img.size[1]}x{img.size[0]}, "
                    f"manifest declares {th}x{tw}"
                )
        got = read_elevation_shape(entry.elev_path)
        if got != (eh, ew):
            raise ManifestError(
                f"tile {entry.id!r}: elevation is {got[0]}x{got[1]}, "
                f"manifest declares {eh}x{ew}"
            )


def load_tile(manifest: DatasetManifest, tile_id: str) -> TileSample:
    entry = manifest.entry(tile_id)
    rgb = _load_rgb(entry.rgb_path)
    mask = _load_mask(entry.mask_path)
    elev = torch.from_numpy(read_elevation(entry.elev_path))
    first = int(mask.flatten()[0])
    label = first if bool((mask == first).all()) else None
    return TileSample(id=tile_id, rgb=rgb, elevation=elev, mask=mask, label=label)


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

def split_dataset(
    manifest: DatasetManifest,
    eval_pool: int,
    finetune_size: int,
    seed: int,
    candidate_ids: Optional[Sequence[str]] = None,
) -> SplitAssignment:
    """Partition tile ids into pretrain / finetune / test sets.

    Draws `eval_pool` ids uniformly without replacement (seeded, over
    canonical entry order), shuffles the pool with the same generator, takes
    the first `finetune_size` as the fine-tuning set and the rest as the
    test set; everything not drawn is the pre-training set. `candidate_ids`
    restricts the draw (e.g. to pure tiles for the classification track)
    and defaults to all entries.
    """
    if candidate_ids is None:
        candidates = manifest.ids()
    else:
        known = set(manifest.ids())
        candidates = list(candidate_ids)
        for cid in candidates:
            if cid not in known:
                raise ValueError(f"candidate id not in manifest: {cid!r}")
    if eval_pool > len(candidates):
        raise ValueError(
            f"eval_pool={eval_pool} exceeds the {len(candidates)} available entries"
        )
    if not finetune_size < eval_pool:
        raise ValueError(
            f"finetune_size={finetune_size} must be smaller than eval_pool={eval_pool}"
        )
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(candidates), size=eval_pool, replace=False)
    pool = [candidates[i] for i in picked]
    rng.shuffle(pool)
    finetune_ids = pool[:finetune_size]
    test_ids = pool[finetune_size:]
    pool_set = set(pool)
    pretrain_ids = [tid for tid in manifest.ids() if tid not in pool_set]
    return SplitAssignment(
        pretrain_ids=pretrain_ids,
        finetune_ids=finetune_ids,
        test_ids=test_ids,
        seed=seed,
    )


def save_split(split: SplitAssignment, path: Path) -> None:
    payload = {
        "seed": split.seed,
        "pretrain": split.pretrain_ids,
        "finetune": split.finetune_ids,
        "test": split.test_ids,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_split(path: Path) -> SplitAssignment:
    with open(path) as fh:
        payload = json.load(fh)
    return SplitAssignment(
        pretrain_ids=list(payload["pretrain"]),
        finetune_ids=list(payload["finetune"]),
        test_ids=list(payload["test"]),
        seed=int(payload["seed"]),
    )


# --------------------------------------------------------------------------
# classification subset and elevation statistics
# --------------------------------------------------------------------------

def derive_classification_set(
    manifest: DatasetManifest, ids: Iterable[str]
) -> list[tuple[str, int]]:
    """Return (id, label) for every tile in `ids` whose mask is constant.

    Output follows canonical manifest order. Tiles with mixed masks are
    dropped; unknown ids raise.
    """
    wanted = set(ids)
    for tid in wanted:
        manifest.entry(tid)  # raises on unknown id
    labeled = []
    for entry in manifest.entries:
        if entry.id not in wanted:
            continue
        mask = _load_mask(entry.mask_path)
        first = int(mask.flatten()[0])
        if bool((mask == first).all()):
            labeled.append((entry.id, first))
    return labeled


def compute_elevation_stats(
    manifest: DatasetManifest, pretrain_ids: Iterable[str]
) -> ElevationStats:
    """Mean/std (population) over all elevation pixels of the given tiles."""
    ids = list(pretrain_ids)
    if not ids:
        raise ValueError("cannot compute elevation stats over an empty id set")
    total = 0.0
    total_sq = 0.0
    count = 0
    for tid in ids:
        values = read_elevation(manifest.entry(tid).elev_path).astype(np.float64)
        total += float(values.sum())
        total_sq += float(np.square(values).sum())
        count += values.size
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    std = max(float(np.sqrt(var)), MIN_ELEV_STD)
    return ElevationStats(mean=float(mean), std=std)


def normalize_elevation(elev: torch.Tensor, stats: ElevationStats) -> torch.Tensor:
    return (elev - stats.mean) / stats.std


def denormalize_elevation(elev: torch.Tensor, stats: ElevationStats) -> torch.Tensor:
    return elev * stats.std + stats.mean
