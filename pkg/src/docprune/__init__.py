"""Training-free visual token pruning for document VQA pipelines."""
from __future__ import annotations

__version__ = "0.1.0"

from .btp import background_ratio, block_coarsen, btp_mask
from .config import PruneConfig, load_config
from .ctp import (
    Criterion,
    DecoderTrace,
    comprehension_entropy,
    comprehension_feature_delta,
    comprehension_l2,
    ctp_mask,
    run_ctp,
    select_prune_layer,
)
from .imagecore import load_image, mode_intensity, tile_patches, to_grayscale
from .masks import Stage, TokenMask
from .metrics import ModelShape, drop_rate, pipeline_flops, top_k_attention_mass, transformer_flops
from .qtp import bilinear_resize, combine_masks, gaussian_smooth, qtp_mask, relevance_scores, reshape_to_grid

__all__ = [
    "Criterion",
    "DecoderTrace",
    "ModelShape",
    "PruneConfig",
    "Stage",
    "TokenMask",
    "background_ratio",
    "bilinear_resize",
    "block_coarsen",
    "btp_mask",
    "combine_masks",
    "comprehension_entropy",
    "comprehension_feature_delta",
    "comprehension_l2",
    "ctp_mask",
    "drop_rate",
    "gaussian_smooth",
    "load_config",
    "load_image",
    "mode_intensity",
    "pipeline_flops",
    "qtp_mask",
    "relevance_scores",
    "reshape_to_grid",
    "run_ctp",
    "select_prune_layer",
    "tile_patches",
    "to_grayscale",
    "top_k_attention_mass",
    "transformer_flops",
]
