"""Local spatial understanding: caption-guided patch attention and top-k
region selection.

The caption's semantic vector queries the RGB patch grid; the patches with
the highest head-averaged attention mass are the "key local regions". Depth
follows by reusing the same indices (shared mode, the default) or by running
its own caption attention (unshared mode, for comparative studies).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import AttentionOutput, DimensionError, Linear, MultiHeadAttention, mha_forward


@dataclass
class DetectorStage:
    """Parameters for one caption-over-patches attention stage."""

    caption_proj: Linear
    patch_proj: Linear
    mha: MultiHeadAttention

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_model: int, heads: int) -> "DetectorStage":
        return cls(
            caption_proj=Linear.init(rng, d, d_model),
            patch_proj=Linear.init(rng, d, d_model),
            mha=MultiHeadAttention.init(rng, d_model, heads),
        )

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = self.caption_proj.parameters(prefix + "caption_proj.")
        out += self.patch_proj.parameters(prefix + "patch_proj.")
        out += self.mha.parameters(prefix + "mha.")
        return out


@dataclass
class TopkSelection:
    """Result of picking the k highest-attention patches.

    Row i of features is the projected feature of patch indices[i]; weights
    carry the attention mass that drove the pick (None for a pure index
    gather on the depth stream).
    """

    features: np.ndarray          # (k, d_model)
    indices: np.ndarray           # (k,) int64, distinct
    weights: np.ndarray | None    # (k,) non-increasing, or None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1:
            raise DimensionError("indices must be 1-D")
        k = self.indices.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != k:
            raise DimensionError(
                f"features must be (k, d_model) with k={k}, got {self.features.shape}"
            )
        if len(np.unique(self.indices)) != k:
            raise ValueError("selection indices must be distinct")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (k,):
                raise DimensionError(f"weights must be ({k},), got {self.weights.shape}")
            if np.any(np.diff(self.weights) > 0):
                raise ValueError("selection weights must be non-increasing")

    @property
    def k(self) -> int:
        return self.indices.shape[0]


def top_k_indices(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest weights, ties broken by lower index.

    Stable mergesort on the negated weights makes the order total: equal
    weights keep their original (ascending-index) order.
    """
    weights = np.asarray(weights, dtype=np.float64).ravel()
    m = weights.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    return np.argsort(-weights, kind="stable")[:k].astype(np.int64)


def semantic_patch_attention(
    caption_sem: np.ndarray, patch_features: np.ndarray, stage: DetectorStage
) -> tuple[AttentionOutput, Tensor]:
    """Caption queries the patch grid; returns the attention result and the
    projected patch matrix the selector gathers from."""
    caption_sem = np.asarray(caption_sem, dtype=np.float64).reshape(1, -1)
    patch_features = np.asarray(patch_features, dtype=np.float64)
    if patch_features.ndim != 2:
        raise DimensionError("patch_features must be 2-D (m, d)")
    if caption_sem.shape[1] != patch_features.shape[1]:
        raise DimensionError(
            f"caption dim {caption_sem.shape[1]} != patch dim {patch_features.shape[1]}"
        )
    query = stage.caption_proj(ad.constant(caption_sem))
    context = stage.patch_proj(ad.constant(patch_features))
    return mha_forward(query, context, stage.mha), context


def detect_topk_regions(
    attended: AttentionOutput, patch_proj: Tensor, k: int
) -> TopkSelection:
    """Select the k patches with the highest head-averaged attention mass."""
    w = attended.avg_weights.data
    if w.shape[0] != 1:
        raise DimensionError(f"expected a single query row, got {w.shape[0]}")
    if patch_proj.data.shape[0] != w.shape[1]:
        raise DimensionError(
            f"patch rows {patch_proj.data.shape[0]} != attention columns {w.shape[1]}"
        )
    idx = top_k_indices(w[0], k)
    return TopkSelection(
        features=patch_proj.data[idx].copy(),
        indices=idx,
        weights=w[0, idx].copy(),
    )


def select_regions_by_index(
    patch_proj: Tensor | np.ndarray, indices: np.ndarray, weights: np.ndarray | None = None
) -> TopkSelection:
    """Gather rows at externally chosen indices (the index-sharing path).

    Pure order-preserving gather: row i of the output is patch row
    indices[i], so RGB-selected regions pick out the spatially matching
    depth features.
    """
    data = patch_proj.data if isinstance(patch_proj, Tensor) else np.asarray(patch_proj)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise DimensionError("indices must be 1-D")
    m = data.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= m):
        raise IndexError(f"index out of range for {m} patches")
    if len(np.unique(indices)) != indices.shape[0]:
        raise ValueError("gather indices must be distinct")
    return TopkSelection(features=data[indices].copy(), indices=indices, weights=weights)


def detect_topk_unshared(
    caption_sem: np.ndarray, patch_features: np.ndarray, stage: DetectorStage, k: int
) -> TopkSelection:
    """Independent caption attention + top-k on one stream (comparison mode)."""
    attended, proj = semantic_patch_attention(caption_sem, patch_features, stage)
    return detect_topk_regions(attended, proj, k)
