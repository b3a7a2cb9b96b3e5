"""envfuse: multi-modal, multi-scale environment embeddings from RGB-D
features, with room-acoustics metrics and a desk-scale diffusion path."""

from .audio import (
    MelSpectrogram,
    Waveform,
    griffin_lim,
    mel_spectrogram,
    read_wav,
    write_wav,
)
from .bundle import (
    BundleError,
    FeatureBundle,
    gen_synthetic_bundle,
    load_bundle,
    save_bundle,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import (
    DenoiserParams,
    DiffusionSchedule,
    build_schedule,
    q_sample,
    sample_toy,
    train_toy,
)
from .fusion import (
    EnvironmentEmbedding,
    PipelineParams,
    PipelineTrace,
    compute_environment_embedding,
    fuse_embeddings,
)
from .gradcheck import grad_check
from .local import TopkSelection, detect_topk_unshared, select_regions_by_index, top_k_indices
from .metrics import mcd, rte, schroeder_rt60
from .nn import AttentionOutput, Linear, MultiHeadAttention, mha_forward

__version__ = "0.1.0"

__all__ = [
    "AttentionOutput",
    "BundleError",
    "DenoiserParams",
    "DiffusionSchedule",
    "EnvironmentEmbedding",
    "FeatureBundle",
    "Linear",
    "MelSpectrogram",
    "MultiHeadAttention",
    "PipelineParams",
    "PipelineTrace",
    "TopkSelection",
    "Waveform",
    "build_schedule",
    "compute_environment_embedding",
    "detect_topk_unshared",
    "fuse_embeddings",
    "gen_synthetic_bundle",
    "grad_check",
    "griffin_lim",
    "load_bundle",
    "load_checkpoint",
    "mcd",
    "mel_spectrogram",
    "mha_forward",
    "q_sample",
    "read_wav",
    "rte",
    "sample_toy",
    "save_bundle",
    "save_checkpoint",
    "schroeder_rt60",
    "select_regions_by_index",
    "top_k_indices",
    "train_toy",
    "write_wav",
]
