"""Dense layers and multi-head attention with hand-derived backward passes.

The attention here is the workhorse of every pipeline stage: scaled
dot-product per head, post-softmax weights averaged across heads so the
average is itself a probability distribution, and a final output projection
(the standard transformer form).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHT_SUM_TOL = 1e-6


class DimensionError(ValueError):
    """Raised when operand shapes disagree with the declared layer shapes."""


def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    """Uniform init in +/- sqrt(6/(d_in+d_out)); keeps initial logits O(1)."""
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


class Linear:
    """Affine map y = x @ weight + bias."""

    def __init__(self, weight, bias):
        self.weight = weight if isinstance(weight, Tensor) else ad.parameter(weight)
        self.bias = bias if isinstance(bias, Tensor) else ad.parameter(bias)
        w, b = self.weight.data, self.bias.data
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
            raise DimensionError(f"bad linear shapes: weight {w.shape}, bias {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("linear parameters must be finite")

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "Linear":
        if d_in < 1 or d_out < 1:
            raise DimensionError("linear dimensions must be positive")
        return cls(glorot_uniform(rng, d_in, d_out), np.zeros(d_out))

    @property
    def d_in(self) -> int:
        return self.weight.data.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.data.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self)

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}weight", self.weight), (f"{prefix}bias", self.bias)]


def linear_forward(x, params: Linear) -> Tensor:
    """Apply the affine map row-wise; x is n x d_in."""
    x = x if isinstance(x, Tensor) else ad.constant(x)
    if x.data.ndim != 2 or x.data.shape[1] != params.d_in:
        raise DimensionError(
            f"linear_forward: input {x.data.shape} vs weight {params.weight.data.shape}"
        )
    return ad.add(ad.matmul(x, params.weight), params.bias)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise exp-normalize with max subtraction, on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionOutput:
    """Updated query-side features plus head-averaged attention weights.

    `avg_weights` rows are probability distributions: the per-head softmax
    matrices are averaged after normalization, so each row sums to 1.
    """

    updated: Tensor
    avg_weights: Tensor

    def __post_init__(self):
        w = self.avg_weights.data
        if (w < 0).any():
            raise ValueError("attention weights must be nonnegative")
        if np.abs(w.sum(axis=-1) - 1.0).max() > WEIGHT_SUM_TOL:
            raise ValueError("attention weight rows must sum to 1")


class MultiHeadAttention:
    """Scaled dot-product attention over `heads` heads of width d_model/heads."""

    def __init__(self, heads: int, query: Linear, key: Linear, value: Linear, out: Linear):
        d_model = query.d_in
        if d_model % heads != 0:
            raise DimensionError(f"d_model {d_model} not divisible by heads {heads}")
        for name, lin in (("query", query), ("key", key), ("value", value), ("out", out)):
            if lin.d_in != d_model or lin.d_out != d_model:
                raise DimensionError(f"{name} projection must be {d_model}x{d_model}")
        self.heads = heads
        self.d_model = d_model
        self.query = query
        self.key = key
        self.value = value
        self.out = out

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int) -> "MultiHeadAttention":
        return cls(
            heads,
            Linear.init(rng, d_model, d_model),
            Linear.init(rng, d_model, d_model),
            Linear.init(rng, d_model, d_model),
            Linear.init(rng, d_model, d_model),
        )

    def __call__(self, query: Tensor, context: Tensor) -> AttentionOutput:
        return mha_forward(query, context, self)

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, lin in (("query", self.query), ("key", self.key),
                          ("value", self.value), ("out", self.out)):
            out.extend(lin.parameters(f"{prefix}{name}."))
        return out


def mha_forward(query, context, params: MultiHeadAttention) -> AttentionOutput:
    """Multi-head attention of Q query rows over S context rows.

    Per head: softmax(q k^T / sqrt(d_model/heads)) v. The returned
    avg_weights (Q x S) is the mean of the per-head post-softmax matrices;
    `updated` is the output projection of the concatenated head contexts.
    """
    q_in = query if isinstance(query, Tensor) else ad.constant(query)
    c_in = context if isinstance(context, Tensor) else ad.constant(context)
    if q_in.data.ndim != 2 or c_in.data.ndim != 2:
        raise DimensionError("mha_forward expects 2-D query and context")
    if q_in.data.shape[1] != params.d_model or c_in.data.shape[1] != params.d_model:
        raise DimensionError(
            f"mha_forward: query {q_in.data.shape}, context {c_in.data.shape}, "
            f"d_model {params.d_model}"
        )
    if c_in.data.shape[0] < 1:
        raise DimensionError("context must contain at least one row")

    h = params.heads
    dh = params.d_model // h
    scale = 1.0 / np.sqrt(dh)

    q = params.query(q_in)
    k = params.key(c_in)
    v = params.value(c_in)

    head_ctx: list[Tensor] = []
    avg: Tensor | None = None
    for i in range(h):
        lo, hi = i * dh, (i + 1) * dh
        qi = ad.slice_cols(q, lo, hi)
        ki = ad.slice_cols(k, lo, hi)
        vi = ad.slice_cols(v, lo, hi)
        scores = ad.mul(ad.matmul(qi, ad.transpose(ki)), scale)
        attn = ad.softmax_rows(scores)
        head_ctx.append(ad.matmul(attn, vi))
        avg = attn if avg is None else ad.add(avg, attn)
    avg = ad.mul(avg, 1.0 / h)

    updated = params.out(ad.concat_cols(head_ctx))
    return AttentionOutput(updated=updated, avg_weights=avg)
