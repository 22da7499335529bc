"""Deterministic synthetic geo-tile generator.

Each tile is built from a smooth random terrain (a sum of signed radial
Gaussian bumps) rescaled to a configured elevation range and stored at the
coarse elevation resolution. The farmland mask is derived from the stored
raster: it is bilinearly upsampled to the RGB resolution and thresholded at
its per-tile median (low ground = farmland), after which each pixel is
flipped independently with probability (1 - coupling) / 2 and again with
probability label_noise. RGB reflectance is a class-dependent base color
plus elevation shading, a per-tile tint, and Gaussian texture noise.

A configurable fraction of tiles is generated "pure": the mask is constant,
with the class chosen by mean elevation against the midpoint of the
elevation range (then subjected to the same flip probabilities). Pure tiles
are what the patch-classification track trains and evaluates on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import (
    DatasetManifest,
    load_manifest,
    save_manifest,
    write_elevation,
    write_mask,
    write_rgb,
)
from .data import ManifestEntry
from .util import derive_rng

# Class base colors (other = brown, farmland = green). The chroma gap is kept
# small relative to the per-tile tint so that absolute color alone does not
# give the class away across tiles.
BASE_COLORS = np.array(
    [
        [0.44, 0.40, 0.30],  # class 0: other
        [0.34, 0.50, 0.28],  # class 1: farmland
    ]
)
SHADING_GAIN = 0.25
BUMP_SIGMA_RANGE = (0.08, 0.30)
BUMP_AMP_RANGE = (0.4, 1.0)


@dataclass
class SynthConfig:
    n_tiles: int = 64
    seed: int = 0
    coupling: float = 0.9
    bump_count: int = 6
    elev_range: tuple[float, float] = (80.0, 220.0)
    label_noise: float = 0.0
    tile_shape: tuple[int, int] = (100, 100)
    elev_shape: tuple[int, int] = (33, 33)
    pure_fraction: float = 0.35
    tint_range: float = 0.22
    noise_sigma: float = 0.02

    def validate(self) -> None:
        if self.n_tiles < 1:
            raise ValueError(f"n_tiles must be >= 1, got {self.n_tiles}")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError(f"coupling must be in [0, 1], got {self.coupling}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError(f"label_noise must be in [0, 1], got {self.label_noise}")
        if not 0.0 <= self.pure_fraction <= 1.0:
            raise ValueError(
                f"pure_fraction must be in [0, 1], got {self.pure_fraction}"
            )
        if self.bump_count < 1:
            raise ValueError(f"bump_count must be >= 1, got {self.bump_count}")
        if not self.elev_range[0] < self.elev_range[1]:
            raise ValueError(f"elev_range must be increasing, got {self.elev_range}")
        for name, shape in (("tile_shape", self.tile_shape), ("elev_shape", self.elev_shape)):
            if len(shape) != 2 or min(shape) < 1:
                raise ValueError(f"{name} must be a pair of positive ints, got {shape}")
        if self.tint_range < 0 or self.noise_sigma < 0:
            raise ValueError("tint_range and noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def upsample_elevation(elev: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear (cell-centers) upsampling of an elevation raster."""
    t = torch.from_numpy(np.ascontiguousarray(elev, dtype=np.float32))
    up = torch.nn.functional.interpolate(
        t[None, None], size=tuple(out_hw), mode="bilinear", align_corners=False
    )
    return up[0, 0].numpy()


def _bump_field(rng: np.random.Generator, bump_count: int, hw: tuple[int, int]) -> np.ndarray:
    """Signed sum-of-Gaussians terrain sampled at cell centers of a grid."""
    centers = rng.random((bump_count, 2))
    sigmas = rng.uniform(*BUMP_SIGMA_RANGE, bump_count)
    amps = rng.uniform(*BUMP_AMP_RANGE, bump_count)
    signs = np.where(rng.random(bump_count) < 0.5, -1.0, 1.0)
    h, w = hw
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    uu, vv = np.meshgrid(u, v)
    field = np.zeros((h, w))
    for k in range(bump_count):
        d2 = (uu - centers[k, 0]) ** 2 + (vv - centers[k, 1]) ** 2
        field += signs[k] * amps[k] * np.exp(-d2 / (2.0 * sigmas[k] ** 2))
    return field


@dataclass
class _Tile:
    elevation: np.ndarray  # [He, We] float32 meters
    mask: np.ndarray       # [H, W] uint8 in {0, 1}
    rgb: np.ndarray        # [3, H, W] float64 in [0, 1]


def _generate_tile(cfg: SynthConfig, index: int) -> _Tile:
    rng = derive_rng(cfg.seed, "synth-tile", index)
    h, w = cfg.tile_shape
    emin, emax = cfg.elev_range

    field = _bump_field(rng, cfg.bump_count, cfg.elev_shape)
    span = field.max() - field.min()
    if span < 1e-9:
        norm_coarse = np.zeros_like(field)
    else:
        norm_coarse = (field - field.min()) / span
    elevation = (emin + norm_coarse * (emax - emin)).astype(np.float32)

    upsampled = upsample_elevation(elevation, (h, w))
    norm = (upsampled.astype(np.float64) - emin) / (emax - emin)

    base_flip_p = (1.0 - cfg.coupling) / 2.0
    is_pure = bool(rng.random() < cfg.pure_fraction)
    if is_pure:
        cls = 1 if float(upsampled.mean()) < (emin + emax) / 2.0 else 0
        terrain_mask = np.full((h, w), cls, dtype=np.uint8)
        mask = terrain_mask.copy()
        if rng.random() < base_flip_p:
            mask ^= 1
        if rng.random() < cfg.label_noise:
            mask ^= 1
    else:
        median = np.median(upsampled)
        terrain_mask = (upsampled < median).astype(np.uint8)
        mask = terrain_mask.copy()
        mask ^= rng.random((h, w)) < base_flip_p
        mask ^= rng.random((h, w)) < cfg.label_noise

    tint = rng.uniform(-cfg.tint_range, cfg.tint_range, 3)
    noise = rng.normal(0.0, cfg.noise_sigma, (3, h, w))
    # Color encodes the terrain-derived class (pre-flip), so lowered coupling
    # decorrelates the label from appearance as well as from elevation.
    base = BASE_COLORS[terrain_mask].transpose(2, 0, 1)
    shading = SHADING_GAIN * (norm - 0.5)
    rgb = np.clip(base + shading[None] + tint[:, None, None] + noise, 0.0, 1.0)
    return _Tile(elevation=elevation, mask=mask, rgb=rgb)


def generate_synthetic(cfg: SynthConfig, out_dir: Path) -> DatasetManifest:
    """Write a fully deterministic synthetic dataset and return its manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    tiles_dir = out_dir / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)

    width = max(5, len(str(cfg.n_tiles - 1)))
    entries = []
    for i in range(cfg.n_tiles):
        tile = _generate_tile(cfg, i)
        tid = f"tile_{i:0{width}d}"
        rgb_path = tiles_dir / f"{tid}_rgb.png"
        elev_path = tiles_dir / f"{tid}_elev.bin"
        mask_path = tiles_dir / f"{tid}_mask.png"
        write_rgb(rgb_path, tile.rgb)
        write_elevation(elev_path, tile.elevation)
        write_mask(mask_path, tile.mask)
        entries.append(
            ManifestEntry(id=tid, rgb_path=rgb_path, elev_path=elev_path, mask_path=mask_path)
        )

    manifest = DatasetManifest(
        root=out_dir,
        tile_shape=cfg.tile_shape,
        elev_shape=cfg.elev_shape,
        entries=entries,
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return load_manifest(out_dir / "manifest.jsonl")
