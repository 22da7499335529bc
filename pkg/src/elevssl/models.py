"""Network definitions: residual encoder, projection heads, U-shaped decoders,
and the classification head.

All widths are pluggable through EncoderSpec so tests can run a tiny preset.
Initialization is seeded per component: every module is initialized from its
own derived torch.Generator, so e.g. the encoder's initial parameters are
identical across methods that differ only in which auxiliary heads exist.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import RegionPair
from .util import derive_torch_generator

STYLE_EPS = 1e-5
MIN_INPUT_SIZE = 32


@dataclass(frozen=True)
class EncoderSpec:
    stage_widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    blocks_per_stage: tuple[int, int, int, int] = (2, 2, 2, 2)
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        if len(self.stage_widths) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("encoder spec requires exactly 4 stages")
        if min(self.stage_widths) < 1 or min(self.blocks_per_stage) < 1:
            raise ValueError("stage widths and block counts must be positive")

    @property
    def embedding_dim(self) -> int:
        return self.stage_widths[3]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def tiny() -> "EncoderSpec":
        return EncoderSpec(stage_widths=(8, 16, 32, 64))


@dataclass(frozen=True)
class ProjectionHeadSpec:
    in_dim: int
    hidden_dim: int = 256
    out_dim: int = 128


@dataclass
class FeaturePyramid:
    f1: torch.Tensor  # [N, C1, ceil(H/4),  ceil(W/4)]
    f2: torch.Tensor  # [N, C2, ceil(H/8),  ceil(W/8)]
    f3: torch.Tensor  # [N, C3, ceil(H/16), ceil(W/16)]
    f4: torch.Tensor  # [N, C4, ceil(H/32), ceil(W/32)]
    pooled: torch.Tensor  # [N, C4]
    input_hw: tuple[int, int]


# --------------------------------------------------------------------------
# seeded initialization
# --------------------------------------------------------------------------

def seeded_init(module: nn.Module, seed: int, component: str) -> None:
    """Reinitialize a module deterministically from (seed, component).

    Convolutions get He-uniform weights; linear layers get the standard
    fan-in uniform scheme; batch-norm is reset to scale 1 / shift 0. Bias
    tensors flagged `_zero_init` stay zero.
    """
    gen = derive_torch_generator("init", seed, component)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=gen)
            if m.bias is not None:
                if getattr(m, "_zero_init", False):
                    nn.init.zeros_(m.bias)
                else:
                    fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
                    bound = 1.0 / math.sqrt(fan_in)
                    nn.init.uniform_(m.bias, -bound, bound, generator=gen)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=gen)
            if m.bias is not None:
                fan_in = m.weight.shape[1]
                bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
                nn.init.uniform_(m.bias, -bound, bound, generator=gen)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------

class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResidualEncoder(nn.Module):
    """Four-stage residual encoder (18-layer configuration by default).

    Stage s has output stride 4 * 2^(s-1); the pyramid spatial sizes are
    ceil(H / stride) at every level.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        c1, c2, c3, c4 = spec.stage_widths
        self.stem = nn.Sequential(
            nn.Conv2d(spec.input_channels, c1, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        widths = [c1, c2, c3, c4]
        strides = [1, 2, 2, 2]
        stages = []
        in_c = c1
        for width, stride, blocks in zip(widths, strides, spec.blocks_per_stage):
            layers = [BasicBlock(in_c, width, stride)]
            layers += [BasicBlock(width, width) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            in_c = width
        self.stage1, self.stage2, self.stage3, self.stage4 = stages

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.ndim != 4 or images.shape[1] != self.spec.input_channels:
            raise ValueError(f"expected [N, {self.spec.input_channels}, H, W], got {tuple(images.shape)}")
        h, w = int(images.shape[2]), int(images.shape[3])
        if h < MIN_INPUT_SIZE or w < MIN_INPUT_SIZE:
            raise ValueError(f"input {h}x{w} is below the minimum size {MIN_INPUT_SIZE}")
        f1 = self.stage1(self.stem(images))
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return FeaturePyramid(f1=f1, f2=f2, f3=f3, f4=f4, pooled=f4.mean(dim=(2, 3)), input_hw=(h, w))


# --------------------------------------------------------------------------
# heads
# --------------------------------------------------------------------------

class ProjectionHead(nn.Module):
    """Two affine layers with one nonlinearity between (disable-able so tests
    can check the affine path in isolation). No output normalization — the
    contrastive loss applies cosine normalization itself."""

    def __init__(self, spec: ProjectionHeadSpec, use_activation: bool = True):
        super().__init__()
        self.spec = spec
        self.fc1 = nn.Linear(spec.in_dim, spec.hidden_dim)
        self.fc2 = nn.Linear(spec.hidden_dim, spec.out_dim)
        self.use_activation = use_activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected [N, {self.spec.in_dim}], got {tuple(x.shape)}")
        h = self.fc1(x)
        if self.use_activation:
            h = F.relu(h)
        return self.fc2(h)


def style_features(fmap: torch.Tensor) -> torch.Tensor:
    """Per-channel spatial mean concatenated with population std (eps inside
    the square root), shape [N, 2C]."""
    if fmap.ndim != 4:
        raise ValueError(f"expected [N, C, h, w], got {tuple(fmap.shape)}")
    mean = fmap.mean(dim=(2, 3))
    var = fmap.var(dim=(2, 3), unbiased=False)
    std = torch.sqrt(var + STYLE_EPS)
    return torch.cat([mean, std], dim=1)


class ClassifierHead(nn.Module):
    """Single affine layer from the pooled embedding to class logits."""

    def __init__(self, in_dim: int, n_classes: int = 2):
        super().__init__()
        self.fc = nn.Linear(in_dim, n_classes)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc(pooled)


# --------------------------------------------------------------------------
# U-shaped decoders
# --------------------------------------------------------------------------

class _UpBlock(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([x, skip], dim=1))


class UDecoder(nn.Module):
    """Decode the pyramid back to stride 4, consuming f3, f2, f1 as skips.

    The bare output is the stride-4 local feature map with
    C_l = stage_widths[0] channels; `head_channels`/`out_shape` add a 1x1
    projection and an exact bilinear resize for dense prediction heads.
    """

    def __init__(
        self,
        encoder_spec: EncoderSpec,
        head_channels: Optional[int] = None,
        out_shape: Optional[tuple[int, int]] = None,
        zero_init_head_bias: bool = False,
    ):
        super().__init__()
        c1, c2, c3, c4 = encoder_spec.stage_widths
        self.up1 = _UpBlock(c4, c3, c3)
        self.up2 = _UpBlock(c3, c2, c2)
        self.up3 = _UpBlock(c2, c1, c1)
        self.out_shape = tuple(out_shape) if out_shape is not None else None
        if head_channels is not None:
            self.head = nn.Conv2d(c1, head_channels, 1)
            if zero_init_head_bias:
                self.head._zero_init = True
        else:
            self.head = None
        if self.head is None and self.out_shape is not None:
            raise ValueError("out_shape requires a projection head")

    @property
    def local_channels(self) -> int:
        return self.up3.conv[0].out_channels

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        x = self.up1(pyramid.f4, pyramid.f3)
        x = self.up2(x, pyramid.f2)
        x = self.up3(x, pyramid.f1)
        if self.head is None:
            return x
        x = self.head(x)
        target = self.out_shape if self.out_shape is not None else pyramid.input_hw
        if tuple(x.shape[-2:]) != tuple(target):
            x = F.interpolate(x, size=tuple(target), mode="bilinear", align_corners=False)
        return x


def make_elevation_decoder(spec: EncoderSpec, out_shape: tuple[int, int]) -> UDecoder:
    return UDecoder(spec, head_channels=1, out_shape=out_shape, zero_init_head_bias=True)


def make_segmentation_decoder(spec: EncoderSpec, n_classes: int = 2) -> UDecoder:
    # out_shape=None resizes to the input resolution recorded in the pyramid.
    return UDecoder(spec, head_channels=n_classes, out_shape=None)


def make_local_decoder(spec: EncoderSpec) -> UDecoder:
    return UDecoder(spec)


# --------------------------------------------------------------------------
# region pooling (local matching support)
# --------------------------------------------------------------------------

def pool_region(
    feats: torch.Tensor, center: tuple[int, int], pool_hw: tuple[int, int]
) -> torch.Tensor:
    """Average a [C, h, w] feature map over a window of `pool_hw` cells
    centered on `center`, clamped to the map bounds. Returns [C]."""
    _, h, w = feats.shape
    r, c = center
    ph, pw = pool_hw
    r0 = max(0, min(r - (ph - 1) // 2, h - 1))
    c0 = max(0, min(c - (pw - 1) // 2, w - 1))
    r1 = min(h, r0 + ph)
    c1 = min(w, c0 + pw)
    return feats[:, r0:r1, c0:c1].mean(dim=(1, 2))


def pool_matched_regions(
    feats_a: torch.Tensor,
    feats_b: torch.Tensor,
    pairs_per_sample: list[list[RegionPair]],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pool every RegionPair of every sample; returns two [M, C_l] stacks in
    matching order (M = total number of regions)."""
    if len(pairs_per_sample) != feats_a.shape[0]:
        raise ValueError("one pair list per sample is required")
    rows_a, rows_b = [], []
    for i, pairs in enumerate(pairs_per_sample):
        for pair in pairs:
            rows_a.append(pool_region(feats_a[i], pair.center_a, pair.pool_a))
            rows_b.append(pool_region(feats_b[i], pair.center_b, pair.pool_b))
    if not rows_a:
        raise ValueError("no regions to pool")
    return torch.stack(rows_a), torch.stack(rows_b)
