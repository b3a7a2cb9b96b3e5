"""Global spatial understanding and the end-to-end fusion pipeline.

Selected local regions attend over the modality's global vector, the caption
then attends over the local-aware rows, and the two modality summaries are
combined by a fixed convex weighting into one environment embedding.

Pipeline per sample:
    caption x RGB patches -> attention mass -> top-k indices
    -> gather RGB rows (and depth rows at the same indices in shared mode)
    -> per-modality local-aware attention over the global vector
    -> per-modality caption-guided pooling to a single vector
    -> weighted sum of the two vectors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bundle import FeatureBundle
from .checkpoint import (
    CheckpointError,
    get_scalar,
    load_checkpoint,
    put_scalar,
    save_checkpoint,
)
from .local import (
    DetectorStage,
    DimensionError,
    top_k_indices,
)
from .nn import AttentionOutput, Linear, MultiHeadAttention, mha_forward

DEFAULT_D_MODEL = 512
DEFAULT_HEADS_DETECTOR = 2
DEFAULT_HEADS_OTHER = 4
DEFAULT_LAMBDA = 0.5
DEFAULT_TOPK = 140

MODES = ("shared", "unshared")

ATTENTION_SUM_TOL = 1e-6


@dataclass
class GlobalStage:
    """Selected rows query the (projected) global vector."""

    global_proj: Linear
    mha: MultiHeadAttention

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_model: int, heads: int) -> "GlobalStage":
        return cls(
            global_proj=Linear.init(rng, d, d_model),
            mha=MultiHeadAttention.init(rng, d_model, heads),
        )

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = self.global_proj.parameters(prefix + "global_proj.")
        out += self.mha.parameters(prefix + "mha.")
        return out


@dataclass
class SemanticStage:
    """The (projected) caption queries the local-aware rows."""

    caption_proj: Linear
    mha: MultiHeadAttention

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_model: int, heads: int) -> "SemanticStage":
        return cls(
            caption_proj=Linear.init(rng, d, d_model),
            mha=MultiHeadAttention.init(rng, d_model, heads),
        )

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = self.caption_proj.parameters(prefix + "caption_proj.")
        out += self.mha.parameters(prefix + "mha.")
        return out


@dataclass
class PipelineParams:
    """Every trainable tensor in the fusion pipeline, plus the fixed mixing
    weights. Both detector stages are always allocated so a checkpoint is
    valid for either sharing mode."""

    d: int
    d_model: int
    heads_detector: int
    heads_other: int
    lambda1: float
    lambda2: float
    detector_rgb: DetectorStage
    detector_depth: DetectorStage
    local_rgb: GlobalStage
    local_depth: GlobalStage
    sem_rgb: SemanticStage
    sem_depth: SemanticStage

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d: int = 768,
        d_model: int = DEFAULT_D_MODEL,
        heads_detector: int = DEFAULT_HEADS_DETECTOR,
        heads_other: int = DEFAULT_HEADS_OTHER,
        lambda1: float = DEFAULT_LAMBDA,
        lambda2: float = DEFAULT_LAMBDA,
    ) -> "PipelineParams":
        if not (np.isfinite(lambda1) and np.isfinite(lambda2)):
            raise ValueError("mixing weights must be finite")
        return cls(
            d=d,
            d_model=d_model,
            heads_detector=heads_detector,
            heads_other=heads_other,
            lambda1=float(lambda1),
            lambda2=float(lambda2),
            detector_rgb=DetectorStage.init(rng, d, d_model, heads_detector),
            detector_depth=DetectorStage.init(rng, d, d_model, heads_detector),
            local_rgb=GlobalStage.init(rng, d, d_model, heads_other),
            local_depth=GlobalStage.init(rng, d, d_model, heads_other),
            sem_rgb=SemanticStage.init(rng, d, d_model, heads_other),
            sem_depth=SemanticStage.init(rng, d, d_model, heads_other),
        )

    def parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        out += self.detector_rgb.parameters("detector_rgb.")
        out += self.detector_depth.parameters("detector_depth.")
        out += self.local_rgb.parameters("local_rgb.")
        out += self.local_depth.parameters("local_depth.")
        out += self.sem_rgb.parameters("sem_rgb.")
        out += self.sem_depth.parameters("sem_depth.")
        return out

    def to_tensors(self) -> dict[str, np.ndarray]:
        tensors: dict[str, np.ndarray] = {}
        put_scalar(tensors, "meta.d", self.d)
        put_scalar(tensors, "meta.d_model", self.d_model)
        put_scalar(tensors, "meta.heads_detector", self.heads_detector)
        put_scalar(tensors, "meta.heads_other", self.heads_other)
        put_scalar(tensors, "meta.lambda1", self.lambda1)
        put_scalar(tensors, "meta.lambda2", self.lambda2)
        for name, tensor in self.parameters():
            tensors[name] = tensor.data.astype(np.float32)
        return tensors

    def save(self, destination) -> int:
        return save_checkpoint(self.to_tensors(), destination)

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "PipelineParams":
        try:
            d = int(get_scalar(tensors, "meta.d"))
            d_model = int(get_scalar(tensors, "meta.d_model"))
            heads_detector = int(get_scalar(tensors, "meta.heads_detector"))
            heads_other = int(get_scalar(tensors, "meta.heads_other"))
            lambda1 = get_scalar(tensors, "meta.lambda1")
            lambda2 = get_scalar(tensors, "meta.lambda2")
        except KeyError as exc:
            raise CheckpointError(f"missing metadata entry {exc}") from exc

        def lin(prefix: str) -> Linear:
            try:
                w = tensors[prefix + "weight"]
                b = tensors[prefix + "bias"]
            except KeyError as exc:
                raise CheckpointError(f"missing parameter {exc}") from exc
            return Linear(ad.parameter(w.astype(np.float64)), ad.parameter(b.astype(np.float64)))

        def mha(prefix: str, heads: int) -> MultiHeadAttention:
            return MultiHeadAttention(
                heads=heads,
                query=lin(prefix + "query."),
                key=lin(prefix + "key."),
                value=lin(prefix + "value."),
                out=lin(prefix + "out."),
            )

        def detector(prefix: str) -> DetectorStage:
            return DetectorStage(
                caption_proj=lin(prefix + "caption_proj."),
                patch_proj=lin(prefix + "patch_proj."),
                mha=mha(prefix + "mha.", heads_detector),
            )

        return cls(
            d=d,
            d_model=d_model,
            heads_detector=heads_detector,
            heads_other=heads_other,
            lambda1=lambda1,
            lambda2=lambda2,
            detector_rgb=detector("detector_rgb."),
            detector_depth=detector("detector_depth."),
            local_rgb=GlobalStage(lin("local_rgb.global_proj."), mha("local_rgb.mha.", heads_other)),
            local_depth=GlobalStage(lin("local_depth.global_proj."), mha("local_depth.mha.", heads_other)),
            sem_rgb=SemanticStage(lin("sem_rgb.caption_proj."), mha("sem_rgb.mha.", heads_other)),
            sem_depth=SemanticStage(lin("sem_depth.caption_proj."), mha("sem_depth.mha.", heads_other)),
        )

    @classmethod
    def load(cls, source) -> "PipelineParams":
        return cls.from_tensors(load_checkpoint(source))


@dataclass
class EnvironmentEmbedding:
    """The fused per-sample environment vector plus its provenance."""

    vector: np.ndarray   # (d_model,) float64
    sample_id: str
    k: int
    mode: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).ravel()
        if not np.isfinite(self.vector).all():
            raise ValueError("embedding contains NaN or Inf")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class PipelineTrace:
    """Every intermediate of one pipeline run, shape-checked on construction."""

    patch_attention: np.ndarray        # (m,) caption-over-RGB attention mass
    indices_rgb: np.ndarray            # (k,)
    indices_depth: np.ndarray          # (k,)
    topk_rgb: np.ndarray               # (k, d_model)
    topk_depth: np.ndarray             # (k, d_model)
    local_rgb: np.ndarray              # (k, d_model)
    local_depth: np.ndarray            # (k, d_model)
    global_rgb: np.ndarray             # (d_model,)
    global_depth: np.ndarray           # (d_model,)
    fused: np.ndarray                  # (d_model,)
    stage_attention_rows: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        k = self.indices_rgb.shape[0]
        d_model = self.fused.shape[0]
        if self.indices_depth.shape != (k,):
            raise DimensionError("depth indices length must match rgb indices")
        for name in ("topk_rgb", "topk_depth", "local_rgb", "local_depth"):
            if getattr(self, name).shape != (k, d_model):
                raise DimensionError(f"{name} must be ({k}, {d_model})")
        for name in ("global_rgb", "global_depth"):
            if getattr(self, name).shape != (d_model,):
                raise DimensionError(f"{name} must be ({d_model},)")
        total = self.patch_attention.sum()
        if abs(total - 1.0) > ATTENTION_SUM_TOL:
            raise ValueError(f"patch attention sums to {total}, expected 1")


def fuse_embeddings(
    rgb_vec: np.ndarray, depth_vec: np.ndarray, lambda1: float, lambda2: float
) -> np.ndarray:
    """Elementwise weighted sum of the two modality vectors.

    The (1, 0) and (0, 1) selector weightings return the corresponding input
    bit-exactly (no arithmetic applied), so degenerate configs are lossless.
    """
    rgb_vec = np.asarray(rgb_vec, dtype=np.float64)
    depth_vec = np.asarray(depth_vec, dtype=np.float64)
    if rgb_vec.shape != depth_vec.shape:
        raise DimensionError(f"shape mismatch {rgb_vec.shape} vs {depth_vec.shape}")
    if lambda1 == 1.0 and lambda2 == 0.0:
        return rgb_vec.copy()
    if lambda1 == 0.0 and lambda2 == 1.0:
        return depth_vec.copy()
    return lambda1 * rgb_vec + lambda2 * depth_vec


def local_aware_attention(
    selected: np.ndarray, global_vec: np.ndarray, stage: GlobalStage
) -> np.ndarray:
    """Each selected row attends over the single projected global vector.

    Residual form: selected + attention(selected -> global). Attention over a
    one-row context is constant in its queries (the single key takes full
    mass), so without the residual the output would discard the selection
    entirely and the downstream embedding could not react to it.
    """
    q = ad.constant(np.asarray(selected, dtype=np.float64))
    g = ad.constant(np.asarray(global_vec, dtype=np.float64).reshape(1, -1))
    out = mha_forward(q, stage.global_proj(g), stage.mha)
    return ad.add(q, out.updated).data.copy()


def semantic_guided_attention(
    caption_sem: np.ndarray, local_rows: np.ndarray, stage: SemanticStage
) -> np.ndarray:
    """The projected caption pools the local-aware rows into one vector."""
    c = ad.constant(np.asarray(caption_sem, dtype=np.float64).reshape(1, -1))
    rows = ad.constant(np.asarray(local_rows, dtype=np.float64))
    out = mha_forward(stage.caption_proj(c), rows, stage.mha)
    return out.updated.data[0].copy()


@dataclass
class _ForwardGraph:
    """Tensor-graph handles kept alive for gradient checks."""

    h_v: Tensor
    attention_rgb: AttentionOutput
    attention_depth: AttentionOutput | None
    indices_rgb: np.ndarray
    indices_depth: np.ndarray
    topk_rgb: Tensor
    topk_depth: Tensor
    local_rgb: AttentionOutput
    local_depth: AttentionOutput
    local_rows_rgb: Tensor
    local_rows_depth: Tensor
    sem_rgb: AttentionOutput
    sem_depth: AttentionOutput


def forward_pipeline(
    caption_sem: np.ndarray,
    rgb_patch: np.ndarray,
    rgb_global: np.ndarray,
    depth_patch: np.ndarray,
    depth_global: np.ndarray,
    params: PipelineParams,
    k: int,
    mode: str = "shared",
) -> _ForwardGraph:
    """Differentiable end-to-end pass returning the live tensor graph.

    Region selection itself is discrete (argsort of attention mass); the
    gathered features remain differentiable w.r.t. the patch projections.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    m = rgb_patch.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")

    caption = ad.constant(np.asarray(caption_sem, dtype=np.float64).reshape(1, -1))
    rgb_p = ad.constant(np.asarray(rgb_patch, dtype=np.float64))
    depth_p = ad.constant(np.asarray(depth_patch, dtype=np.float64))
    rgb_g = ad.constant(np.asarray(rgb_global, dtype=np.float64).reshape(1, -1))
    depth_g = ad.constant(np.asarray(depth_global, dtype=np.float64).reshape(1, -1))

    det = params.detector_rgb
    ctx_rgb = det.patch_proj(rgb_p)
    att_rgb = mha_forward(det.caption_proj(caption), ctx_rgb, det.mha)
    idx_rgb = top_k_indices(att_rgb.avg_weights.data[0], k)
    topk_rgb = ad.gather_rows(ctx_rgb, idx_rgb)

    det_d = params.detector_depth
    ctx_depth = det_d.patch_proj(depth_p)
    att_depth = None
    if mode == "shared":
        idx_depth = idx_rgb.copy()
    else:
        att_depth = mha_forward(det_d.caption_proj(caption), ctx_depth, det_d.mha)
        idx_depth = top_k_indices(att_depth.avg_weights.data[0], k)
    topk_depth = ad.gather_rows(ctx_depth, idx_depth)

    # residual form: a one-row context would otherwise erase the selection
    # (its single key takes full attention mass for every query row)
    g_rgb = params.local_rgb.global_proj(rgb_g)
    local_rgb = mha_forward(topk_rgb, g_rgb, params.local_rgb.mha)
    local_rgb_rows = ad.add(topk_rgb, local_rgb.updated)
    g_depth = params.local_depth.global_proj(depth_g)
    local_depth = mha_forward(topk_depth, g_depth, params.local_depth.mha)
    local_depth_rows = ad.add(topk_depth, local_depth.updated)

    sem_rgb = mha_forward(
        params.sem_rgb.caption_proj(caption), local_rgb_rows, params.sem_rgb.mha
    )
    sem_depth = mha_forward(
        params.sem_depth.caption_proj(caption), local_depth_rows, params.sem_depth.mha
    )

    h_v = ad.add(
        ad.mul(sem_rgb.updated, params.lambda1),
        ad.mul(sem_depth.updated, params.lambda2),
    )
    return _ForwardGraph(
        h_v=h_v,
        attention_rgb=att_rgb,
        attention_depth=att_depth,
        indices_rgb=idx_rgb,
        indices_depth=idx_depth,
        topk_rgb=topk_rgb,
        topk_depth=topk_depth,
        local_rgb=local_rgb,
        local_depth=local_depth,
        local_rows_rgb=local_rgb_rows,
        local_rows_depth=local_depth_rows,
        sem_rgb=sem_rgb,
        sem_depth=sem_depth,
    )


def compute_environment_embedding(
    bundle: FeatureBundle, params: PipelineParams, k: int = DEFAULT_TOPK, mode: str = "shared"
) -> tuple[EnvironmentEmbedding, PipelineTrace]:
    """Run the full pipeline on one bundle; deterministic given inputs."""
    if bundle.d != params.d:
        raise DimensionError(f"bundle dim {bundle.d} != parameter dim {params.d}")
    g = forward_pipeline(
        bundle.caption_sem,
        bundle.rgb_patch,
        bundle.rgb_global,
        bundle.depth_patch,
        bundle.depth_global,
        params,
        k,
        mode,
    )
    if mode == "shared" and not np.array_equal(g.indices_rgb, g.indices_depth):
        raise AssertionError("shared mode must gather both modalities at the same indices")
    stage_rows = {
        "detector_rgb": g.attention_rgb.avg_weights.data.copy(),
        "local_rgb": g.local_rgb.avg_weights.data.copy(),
        "local_depth": g.local_depth.avg_weights.data.copy(),
        "sem_rgb": g.sem_rgb.avg_weights.data.copy(),
        "sem_depth": g.sem_depth.avg_weights.data.copy(),
    }
    if g.attention_depth is not None:
        stage_rows["detector_depth"] = g.attention_depth.avg_weights.data.copy()
    trace = PipelineTrace(
        patch_attention=g.attention_rgb.avg_weights.data[0].copy(),
        indices_rgb=g.indices_rgb,
        indices_depth=g.indices_depth,
        topk_rgb=g.topk_rgb.data.copy(),
        topk_depth=g.topk_depth.data.copy(),
        local_rgb=g.local_rows_rgb.data.copy(),
        local_depth=g.local_rows_depth.data.copy(),
        global_rgb=g.sem_rgb.updated.data[0].copy(),
        global_depth=g.sem_depth.updated.data[0].copy(),
        fused=g.h_v.data[0].copy(),
        stage_attention_rows=stage_rows,
    )
    emb = EnvironmentEmbedding(
        vector=g.h_v.data[0].copy(), sample_id=bundle.sample_id, k=k, mode=mode
    )
    return emb, trace


def save_embedding_f32(path, emb: EnvironmentEmbedding) -> None:
    """Raw little-endian f32 vector dump (no header)."""
    np.ascontiguousarray(emb.vector, dtype="<f4").tofile(str(path))


def load_embedding_f32(path) -> np.ndarray:
    return np.fromfile(str(path), dtype="<f4").astype(np.float64)


def write_embeddings_csv(path, embeddings: list[EnvironmentEmbedding]) -> None:
    """One row per sample: sample_id, mode, k, then the vector entries."""
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        for emb in sorted(embeddings, key=lambda e: e.sample_id):
            values = [f"{v:.8e}" for v in emb.vector]
            writer.writerow([emb.sample_id, emb.mode, emb.k, *values])


def export_path_for(sample_id: str, out_dir: Path, mode: str, k: int) -> Path:
    return Path(out_dir) / f"{sample_id}.{mode}.k{k}.f32"
