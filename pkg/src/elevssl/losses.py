"""Training objectives: NT-Xent, elevation pixel regression, GLCNet's
global/local composite, and the combined elevation-aware objective.

All reductions run in a fixed row-major order (batch, then pixels) so
single-threaded results are bit-reproducible. The weighted combiners return
their parts *exactly* at the boundary weights (no `0 * x` arithmetic), which
is what makes the boundary-reduction equivalences bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .models import pool_matched_regions

COSINE_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    tau: float = 0.5
    alpha: float = 0.5
    lam: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")


@dataclass
class LossBreakdown:
    total: float
    contrastive: Optional[float] = None
    elevation: Optional[float] = None
    global_part: Optional[float] = None
    local_part: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "contrastive": self.contrastive,
            "elevation": self.elevation,
            "global_part": self.global_part,
            "local_part": self.local_part,
        }


def nt_xent(za: torch.Tensor, zb: torch.Tensor, tau: float) -> torch.Tensor:
    """Normalized temperature-scaled cross-entropy over N positive pairs.

    For each of the 2N anchors the positive is its counterpart view; the
    denominator ranges over the positive plus the 2(N-1) other embeddings
    (the anchor itself is excluded). Cosine similarities are divided by tau
    and reduced with a max-subtracted log-sum-exp.
    """
    if za.ndim != 2 or zb.ndim != 2 or za.shape != zb.shape:
        raise ValueError(
            f"expected matching [N, D] views, got {tuple(za.shape)} and {tuple(zb.shape)}"
        )
    n = za.shape[0]
    if n < 2:
        raise ValueError(f"nt_xent needs N >= 2 (no negatives exist for N={n})")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = torch.cat([za, zb], dim=0)
    norms = torch.linalg.vector_norm(z, dim=1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    zn = z / norms.clamp_min(COSINE_EPS)[:, None]
    sim = (zn @ zn.t()) / tau
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    denom = torch.logsumexp(sim.masked_fill(self_mask, float("-inf")), dim=1)
    idx = torch.arange(2 * n, device=z.device)
    pos = sim[idx, (idx + n) % (2 * n)]
    return (denom - pos).mean()


def elevation_loss(
    pred: torch.Tensor, target: torch.Tensor, mode: str = "per_pixel"
) -> torch.Tensor:
    """Squared-error elevation regression loss.

    mode="pixel_sum": sum of squared residuals over all pixels, averaged over the
    batch only. mode="per_pixel" (default): the same value divided by the
    number of pixels per map, which keeps the magnitude commensurate with
    the O(1) contrastive terms under a 50/50 combination.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.ndim != 3:
        raise ValueError(f"expected [N, He, We] maps, got {tuple(pred.shape)}")
    if pred.shape[0] < 1:
        raise ValueError("elevation_loss needs at least one sample")
    if mode not in ("pixel_sum", "per_pixel"):
        raise ValueError(f"unknown mode {mode!r}")
    n, he, we = pred.shape
    base = torch.sum((pred - target) ** 2) / n
    if mode == "pixel_sum":
        return base
    return base / (he * we)


def local_matching_loss(
    feats_a: torch.Tensor,
    feats_b: torch.Tensor,
    pairs_per_sample: list,
    head: nn.Module,
    tau: float,
) -> torch.Tensor:
    """Pool matched decoder regions from both views, project them, and apply
    NT-Xent over the flattened batch of M region embeddings (positives are
    the matched pairs, negatives all other regions)."""
    if not any(len(p) for p in pairs_per_sample):
        raise ValueError("local_matching_loss needs at least one region pair")
    pooled_a, pooled_b = pool_matched_regions(feats_a, feats_b, pairs_per_sample)
    return nt_xent(head(pooled_a), head(pooled_b), tau)


def glcnet_combine(global_part, local_part, lam: float):
    """lam * L_G + (1 - lam) * L_L, returning the parts exactly at lam in {0, 1}."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    if lam == 1.0:
        return global_part
    if lam == 0.0:
        return local_part
    return lam * global_part + (1.0 - lam) * local_part


def combined_loss(contrastive, elevation, alpha: float):
    """alpha * L_E + (1 - alpha) * L_C, returning the parts exactly at the
    boundaries (alpha=1 -> pure elevation objective, alpha=0 -> pure
    contrastive objective)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return elevation
    if alpha == 0.0:
        return contrastive
    return alpha * elevation + (1.0 - alpha) * contrastive


def glcnet_loss(
    global_a: torch.Tensor,
    global_b: torch.Tensor,
    local_loss: torch.Tensor,
    weights: LossWeights,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Composite contrastive objective: weighted global style term plus
    local matching term. Returns the loss tensor and a float breakdown."""
    global_loss = nt_xent(global_a, global_b, weights.tau)
    total = glcnet_combine(global_loss, local_loss, weights.lam)
    breakdown = LossBreakdown(
        total=float(total.detach()),
        contrastive=float(total.detach()),
        global_part=float(global_loss.detach()),
        local_part=float(local_loss.detach()),
    )
    return total, breakdown
