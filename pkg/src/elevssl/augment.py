"""Seeded augmentation pipeline with full geometry tracking.

An AugSpec is a complete, replayable description of one augmentation:
applying it is a pure function of (image, spec). Specs are drawn from an
AugPolicy by `sample_aug_spec`; the same geometry can then be applied to the
collocated elevation raster (crop + flips only) and mapped into feature-map
coordinates for local region matching.

Conventions, fixed so independent implementations agree:
  * application order: crop -> resize (bilinear) -> hflip -> vflip ->
    color jitter (brightness, contrast, saturation, hue, in that order) ->
    grayscale; the result is clipped to [0, 1];
  * all resampling is bilinear with the cell-centers convention (no corner
    alignment), border-clamped;
  * crop height/width are round(H * sqrt(scale * aspect)) and
    round(W * sqrt(scale / aspect)), so scale is an area fraction and
    scale = 1, aspect = 1 is exactly the full image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import ElevationStats, TileSample, normalize_elevation

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
UNIT_JITTER = (1.0, 1.0, 1.0, 0.0)


class OverlapTooSmall(ValueError):
    """Two crop boxes overlap by less than one matching patch."""


@dataclass(frozen=True)
class AugSpec:
    crop_box: tuple[int, int, int, int]  # top, left, height, width (source px)
    hflip: bool
    vflip: bool
    color_jitter: tuple[float, float, float, float]  # brightness, contrast, saturation, hue
    grayscale: bool
    out_size: tuple[int, int]

    def is_identity_for(self, shape: tuple[int, int]) -> bool:
        return (
            self.crop_box == (0, 0, shape[0], shape[1])
            and not self.hflip
            and not self.vflip
            and self.color_jitter == UNIT_JITTER
            and not self.grayscale
            and self.out_size == tuple(shape)
        )


@dataclass
class AugPolicy:
    """Declarative ranges and probabilities for spec sampling."""

    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_aspect: tuple[float, float] = (1.0, 1.0)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    grayscale_p: float = 0.2
    out_size: Optional[tuple[int, int]] = None  # None = source size

    def validate(self) -> None:
        for name, pair in (("crop_scale", self.crop_scale), ("crop_aspect", self.crop_aspect)):
            lo, hi = pair
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {pair}")
        if self.crop_scale[1] > 1.0:
            raise ValueError(f"crop_scale upper bound must be <= 1, got {self.crop_scale}")
        for name, p in (
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
        ):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if not 0.0 <= self.hue <= 0.5:
            raise ValueError(f"hue strength must be in [0, 0.5], got {self.hue}")
        for name, s in (
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ):
            if s < 0:
                raise ValueError(f"{name} strength must be non-negative, got {s}")


def identity_policy(out_size: Optional[tuple[int, int]] = None) -> AugPolicy:
    """Policy whose every draw is the identity spec (up to out_size)."""
    return AugPolicy(
        crop_scale=(1.0, 1.0),
        crop_aspect=(1.0, 1.0),
        hflip_p=0.0,
        vflip_p=0.0,
        jitter_p=0.0,
        brightness=0.0,
        contrast=0.0,
        saturation=0.0,
        hue=0.0,
        grayscale_p=0.0,
        out_size=out_size,
    )


@dataclass
class ViewTriple:
    view_contrast_a: torch.Tensor
    view_contrast_b: torch.Tensor
    view_elev: torch.Tensor
    spec_a: AugSpec
    spec_b: AugSpec
    spec_e: AugSpec
    elev_target: torch.Tensor


@dataclass(frozen=True)
class RegionPair:
    center_a: tuple[int, int]  # (row, col) in view-A feature coordinates
    center_b: tuple[int, int]
    patch: int                 # side length in source pixels
    pool_a: tuple[int, int]    # pooling footprint in feature cells, view A
    pool_b: tuple[int, int]


# --------------------------------------------------------------------------
# spec sampling
# --------------------------------------------------------------------------

def sample_aug_spec(
    source_shape: tuple[int, int], policy: AugPolicy, rng: np.random.Generator
) -> AugSpec:
    """Draw one augmentation spec. Pure given the generator state."""
    h_src, w_src = source_shape
    if h_src < 1 or w_src < 1:
        raise ValueError(f"degenerate source shape {source_shape}")
    policy.validate()

    scale = float(rng.uniform(*policy.crop_scale))
    aspect = float(rng.uniform(*policy.crop_aspect))
    crop_h = min(h_src, max(1, round(h_src * math.sqrt(scale * aspect))))
    crop_w = min(w_src, max(1, round(w_src * math.sqrt(scale / aspect))))
    top = int(rng.integers(0, h_src - crop_h + 1))
    left = int(rng.integers(0, w_src - crop_w + 1))
    hflip = bool(rng.random() < policy.hflip_p)
    vflip = bool(rng.random() < policy.vflip_p)
    if rng.random() < policy.jitter_p:
        jitter = (
            float(rng.uniform(max(0.0, 1.0 - policy.brightness), 1.0 + policy.brightness)),
            float(rng.uniform(max(0.0, 1.0 - policy.contrast), 1.0 + policy.contrast)),
            float(rng.uniform(max(0.0, 1.0 - policy.saturation), 1.0 + policy.saturation)),
            float(rng.uniform(-policy.hue, policy.hue)),
        )
    else:
        jitter = UNIT_JITTER
    grayscale = bool(rng.random() < policy.grayscale_p)
    out_size = tuple(policy.out_size) if policy.out_size is not None else (h_src, w_src)
    return AugSpec(
        crop_box=(top, left, crop_h, crop_w),
        hflip=hflip,
        vflip=vflip,
        color_jitter=jitter,
        grayscale=grayscale,
        out_size=out_size,
    )


# --------------------------------------------------------------------------
# spec application (images)
# --------------------------------------------------------------------------

def _luma(img: torch.Tensor) -> torch.Tensor:
    r, g, b = LUMA_WEIGHTS
    return r * img[0] + g * img[1] + b * img[2]


def _rgb_to_hsv(img: torch.Tensor) -> torch.Tensor:
    r, g, b = img[0], img[1], img[2]
    maxc = torch.max(img, dim=0).values
    minc = torch.min(img, dim=0).values
    v = maxc
    delta = maxc - minc
    s = torch.where(maxc > 0, delta / maxc.clamp(min=1e-12), torch.zeros_like(maxc))
    safe = delta.clamp(min=1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = torch.zeros_like(maxc)
    h = torch.where(maxc == r, bc - gc, h)
    h = torch.where(maxc == g, 2.0 + rc - bc, h)
    h = torch.where(maxc == b, 4.0 + gc - rc, h)
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    return torch.stack([h, s, v])


def _hsv_to_rgb(hsv: torch.Tensor) -> torch.Tensor:
    h, s, v = hsv[0], hsv[1], hsv[2]
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.to(torch.int64) % 6
    stacked = torch.stack(
        [
            torch.stack([v, t, p]),
            torch.stack([q, v, p]),
            torch.stack([p, v, t]),
            torch.stack([p, q, v]),
            torch.stack([t, p, v]),
            torch.stack([v, p, q]),
        ]
    )  # [6, 3, H, W]
    idx = i[None, None].expand(1, 3, *h.shape)
    return torch.gather(stacked, 0, idx)[0]


def apply_spec(image: torch.Tensor, spec: AugSpec) -> torch.Tensor:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {tuple(image.shape)}")
    _, h_src, w_src = image.shape
    top, left, crop_h, crop_w = spec.crop_box
    if top < 0 or left < 0 or top + crop_h > h_src or left + crop_w > w_src:
        raise ValueError(f"crop_box {spec.crop_box} out of bounds for {h_src}x{w_src}")

    out = image[:, top : top + crop_h, left : left + crop_w].clone()
    if (crop_h, crop_w) != tuple(spec.out_size):
        out = F.interpolate(
            out[None], size=tuple(spec.out_size), mode="bilinear", align_corners=False
        )[0]
    if spec.hflip:
        out = torch.flip(out, dims=[2])
    if spec.vflip:
        out = torch.flip(out, dims=[1])

    fb, fc, fs, fh = spec.color_jitter
    if fb != 1.0:
        out = (out * fb).clamp(0.0, 1.0)
    if fc != 1.0:
        mean = _luma(out).mean()
        out = ((out - mean) * fc + mean).clamp(0.0, 1.0)
    if fs != 1.0:
        gray = _luma(out)[None]
        out = (gray + (out - gray) * fs).clamp(0.0, 1.0)
    if fh != 0.0:
        hsv = _rgb_to_hsv(out.clamp(0.0, 1.0))
        hsv[0] = (hsv[0] + fh) % 1.0
        out = _hsv_to_rgb(hsv)
    if spec.grayscale:
        out = _luma(out)[None].expand(3, -1, -1).clone()
    return out.clamp(0.0, 1.0)


# --------------------------------------------------------------------------
# spec application (elevation geometry)
# --------------------------------------------------------------------------

def resample_region(
    arr: torch.Tensor,
    top: float,
    left: float,
    height: float,
    width: float,
    out_hw: tuple[int, int],
) -> torch.Tensor:
    """Bilinear resample of a (possibly fractional) region of a 2-D array.

    Output cell (i, j) samples the source at
    y = top + (i + 0.5) * height / out_h - 0.5 (and likewise for x), clamped
    to the region — the cell-centers convention. Clamping at the region
    border (not the array border) makes an integer box match slicing
    followed by bilinear interpolation of the slice.
    """
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D array, got shape {tuple(arr.shape)}")
    h_arr, w_arr = arr.shape
    out_h, out_w = out_hw
    ys = top + (torch.arange(out_h, dtype=torch.float64) + 0.5) * (height / out_h) - 0.5
    xs = left + (torch.arange(out_w, dtype=torch.float64) + 0.5) * (width / out_w) - 0.5
    y_lo = max(0.0, top)
    x_lo = max(0.0, left)
    y_hi = min(float(h_arr - 1), max(y_lo, top + height - 1.0))
    x_hi = min(float(w_arr - 1), max(x_lo, left + width - 1.0))
    ys = ys.clamp(y_lo, y_hi)
    xs = xs.clamp(x_lo, x_hi)
    y0 = ys.floor().to(torch.int64).clamp(0, h_arr - 1)
    x0 = xs.floor().to(torch.int64).clamp(0, w_arr - 1)
    y1 = (y0 + 1).clamp(max=h_arr - 1)
    x1 = (x0 + 1).clamp(max=w_arr - 1)
    wy = (ys - y0.to(torch.float64)).to(arr.dtype)
    wx = (xs - x0.to(torch.float64)).to(arr.dtype)
    a = arr[y0][:, x0]
    b = arr[y0][:, x1]
    c = arr[y1][:, x0]
    d = arr[y1][:, x1]
    wy = wy[:, None]
    wx = wx[None, :]
    return (
        a * (1 - wy) * (1 - wx)
        + b * (1 - wy) * wx
        + c * wy * (1 - wx)
        + d * wy * wx
    )


def apply_spec_to_elevation(
    elev: torch.Tensor, spec: AugSpec, src_shape: tuple[int, int]
) -> torch.Tensor:
    """Apply only the geometric parts of a spec to the elevation raster.

    The crop box (in RGB source pixels) is scaled into elevation coordinates
    and the region is resampled back to the raster's own shape, then flips
    are applied. Photometric fields are ignored.
    """
    if elev.ndim != 2:
        raise ValueError(f"expected 2-D elevation, got shape {tuple(elev.shape)}")
    he, we = elev.shape
    h_src, w_src = src_shape
    top, left, crop_h, crop_w = spec.crop_box
    if spec.is_identity_for(src_shape):
        return elev.clone()
    sy = he / h_src
    sx = we / w_src
    out = resample_region(
        elev, top * sy, left * sx, crop_h * sy, crop_w * sx, (he, we)
    )
    if spec.hflip:
        out = torch.flip(out, dims=[1])
    if spec.vflip:
        out = torch.flip(out, dims=[0])
    return out


def make_view_triple(
    sample: TileSample,
    policy: AugPolicy,
    rng: np.random.Generator,
    stats: ElevationStats,
) -> ViewTriple:
    """Draw three independent specs and build the two contrastive views plus
    the elevation view with its geometry-consistent normalized target."""
    src_shape = (int(sample.rgb.shape[1]), int(sample.rgb.shape[2]))
    spec_a = sample_aug_spec(src_shape, policy, rng)
    spec_b = sample_aug_spec(src_shape, policy, rng)
    spec_e = sample_aug_spec(src_shape, policy, rng)
    target = normalize_elevation(
        apply_spec_to_elevation(sample.elevation, spec_e, src_shape), stats
    )
    return ViewTriple(
        view_contrast_a=apply_spec(sample.rgb, spec_a),
        view_contrast_b=apply_spec(sample.rgb, spec_b),
        view_elev=apply_spec(sample.rgb, spec_e),
        spec_a=spec_a,
        spec_b=spec_b,
        spec_e=spec_e,
        elev_target=target,
    )


# --------------------------------------------------------------------------
# region matching
# --------------------------------------------------------------------------

def source_to_feature(
    spec: AugSpec, feat_shape: tuple[int, int], y: float, x: float
) -> tuple[float, float]:
    """Map a source-image point through a spec into feature-map coordinates."""
    top, left, crop_h, crop_w = spec.crop_box
    out_h, out_w = spec.out_size
    h_f, w_f = feat_shape
    v = (y - top + 0.5) * out_h / crop_h - 0.5
    u = (x - left + 0.5) * out_w / crop_w - 0.5
    if spec.vflip:
        v = out_h - 1 - v
    if spec.hflip:
        u = out_w - 1 - u
    r = (v + 0.5) * h_f / out_h - 0.5
    c = (u + 0.5) * w_f / out_w - 0.5
    return r, c


def feature_to_source(
    spec: AugSpec, feat_shape: tuple[int, int], r: float, c: float
) -> tuple[float, float]:
    """Inverse of source_to_feature (exact for the continuous map)."""
    top, left, crop_h, crop_w = spec.crop_box
    out_h, out_w = spec.out_size
    h_f, w_f = feat_shape
    v = (r + 0.5) * out_h / h_f - 0.5
    u = (c + 0.5) * out_w / w_f - 0.5
    if spec.vflip:
        v = out_h - 1 - v
    if spec.hflip:
        u = out_w - 1 - u
    y = (v + 0.5) * crop_h / out_h - 0.5 + top
    x = (u + 0.5) * crop_w / out_w - 0.5 + left
    return y, x


def _round_cell(value: float, limit: int) -> int:
    return int(min(max(math.floor(value + 0.5), 0), limit - 1))


def _pool_cells(patch: int, crop: int, feat: int) -> int:
    return max(1, round(patch * feat / crop))


def matched_regions(
    spec_a: AugSpec,
    spec_b: AugSpec,
    n_regions: int,
    patch: int,
    feat_shape: tuple[int, int],
    rng: np.random.Generator,
) -> list[RegionPair]:
    """Sample source points in the crop overlap and map them into both
    views' feature grids. Raises OverlapTooSmall when the crop boxes share
    less than a patch x patch source area."""
    ta, la, ha, wa = spec_a.crop_box
    tb, lb, hb, wb = spec_b.crop_box
    top = max(ta, tb)
    bottom = min(ta + ha, tb + hb)
    left = max(la, lb)
    right = min(la + wa, lb + wb)
    if bottom - top < patch or right - left < patch:
        raise OverlapTooSmall(
            f"crop overlap {max(0, bottom - top)}x{max(0, right - left)} "
            f"is smaller than patch {patch}"
        )
    h_f, w_f = feat_shape
    half = patch / 2.0
    pairs = []
    for _ in range(n_regions):
        y = float(rng.uniform(top + half, bottom - half))
        x = float(rng.uniform(left + half, right - half))
        ra, ca = source_to_feature(spec_a, (h_f, w_f), y, x)
        rb, cb = source_to_feature(spec_b, (h_f, w_f), y, x)
        pairs.append(
            RegionPair(
                center_a=(_round_cell(ra, h_f), _round_cell(ca, w_f)),
                center_b=(_round_cell(rb, h_f), _round_cell(cb, w_f)),
                patch=patch,
                pool_a=(_pool_cells(patch, ha, h_f), _pool_cells(patch, wa, w_f)),
                pool_b=(_pool_cells(patch, hb, h_f), _pool_cells(patch, wb, w_f)),
            )
        )
    return pairs
