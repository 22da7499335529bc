"""Elevation-aware contrastive pre-training toolkit for Earth-observation tiles."""

from .augment import (
    AugPolicy,
    AugSpec,
    OverlapTooSmall,
    RegionPair,
    ViewTriple,
    apply_spec,
    apply_spec_to_elevation,
    identity_policy,
    make_view_triple,
    matched_regions,
    sample_aug_spec,
)
from .data import (
    DatasetManifest,
    ElevationStats,
    ManifestError,
    SplitAssignment,
    TileSample,
    compute_elevation_stats,
    derive_classification_set,
    denormalize_elevation,
    load_manifest,
    load_split,
    load_tile,
    normalize_elevation,
    read_elevation,
    save_manifest,
    save_split,
    split_dataset,
    write_elevation,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    combined_loss,
    elevation_loss,
    glcnet_combine,
    glcnet_loss,
    local_matching_loss,
    nt_xent,
)
from .metrics import (
    ConfusionMatrix,
    EvalReport,
    accumulate,
    evaluate_classifier,
    evaluate_segmenter,
    metrics_from_cm,
)
from .models import (
    EncoderSpec,
    FeaturePyramid,
    ProjectionHead,
    ProjectionHeadSpec,
    ResidualEncoder,
    UDecoder,
    make_elevation_decoder,
    make_local_decoder,
    make_segmentation_decoder,
    style_features,
)
from .synthetic import SynthConfig, generate_synthetic, upsample_elevation
from .training import (
    FinetuneConfig,
    FinetuneModel,
    PretrainConfig,
    cosine_lr,
    finetune,
    pretrain,
)

__version__ = "0.1.0"
