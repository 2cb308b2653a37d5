"""Frequency-domain single-image super-resolution toolkit.

The pipeline: images are block-transformed (32x32 DCT), the low-frequency
R x R corner becomes per-frequency channel maps, a two-branch network predicts
corrected maps from the bicubic-upscaled input, and the inverse transform
reassembles the image. See the README for the command-line surface.
"""

from .dct import (
    ChannelStats,
    FreqMaps,
    blocks_to_plane,
    compute_channel_stats,
    denormalize_maps,
    forward_dct_block,
    inverse_dct_block,
    load_freqmaps,
    load_stats,
    maps_to_blocks,
    normalize_maps,
    plane_to_blocks,
    reform_to_maps,
    save_freqmaps,
    save_stats,
)
from .enhance import MergeJob, merge_channels, merge_maps, parse_selection, reconstruct_merged
from .errors import InvalidInputError, StateError, TrainingDivergedError
from .infer import SuperResolveResult, bicubic_upscale_image, super_resolve
from .metrics import (
    CharbonnierParams,
    WeightProfile,
    freq_loss,
    frm,
    psnr_y,
    region_residual_profile,
    table1_weights,
)
from .model import (
    CheckpointBundle,
    ModelConfig,
    freqnet_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .selfcheck import run_selfcheck
from .training import (
    AdamConfig,
    CosLrConfig,
    TrainConfig,
    TrainResult,
    adam_step,
    corpus_stats,
    cos_lr,
    evaluate,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamConfig",
    "ChannelStats",
    "CharbonnierParams",
    "CheckpointBundle",
    "CosLrConfig",
    "FreqMaps",
    "InvalidInputError",
    "MergeJob",
    "ModelConfig",
    "StateError",
    "SuperResolveResult",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "WeightProfile",
    "adam_step",
    "bicubic_upscale_image",
    "blocks_to_plane",
    "compute_channel_stats",
    "corpus_stats",
    "cos_lr",
    "denormalize_maps",
    "evaluate",
    "forward_dct_block",
    "freq_loss",
    "freqnet_forward",
    "frm",
    "init_params",
    "inverse_dct_block",
    "load_checkpoint",
    "load_freqmaps",
    "load_stats",
    "maps_to_blocks",
    "merge_channels",
    "merge_maps",
    "normalize_maps",
    "parse_selection",
    "plane_to_blocks",
    "psnr_y",
    "reconstruct_merged",
    "reform_to_maps",
    "region_residual_profile",
    "run_selfcheck",
    "save_checkpoint",
    "save_freqmaps",
    "save_stats",
    "super_resolve",
    "table1_weights",
    "train",
]
