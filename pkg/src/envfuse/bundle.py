"""Portable binary feature bundles (.m2fb).

One bundle holds a sample's pre-extracted features: patch-level and global
RGB features, the same for Depth, and the caption's semantic vector. The
byte layout is fixed little-endian so bundles written anywhere load
bit-exactly here, and the loader rejects anything non-finite or
dimensionally inconsistent rather than repairing it.

Layout:
    magic "M2FB" | version u32 | m u32 | d u32
    | sample_id: u32 length + UTF-8
    | caption flag u8, if 1: u32 length + UTF-8 caption
    | rgb_patch m*d f32 row-major | rgb_global d f32
    | depth_patch m*d f32 | depth_global d f32 | caption_sem d f32
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"M2FB"
VERSION = 1
FILE_EXTENSION = ".m2fb"

DEFAULT_PATCHES = 256
DEFAULT_DIM = 768


class BundleError(Exception):
    """Base class for bundle format and validation failures."""


class BadMagicError(BundleError):
    pass


class UnsupportedVersionError(BundleError):
    pass


class TruncatedStreamError(BundleError):
    pass


class NonFiniteValueError(BundleError):
    pass


class DimensionMismatchError(BundleError):
    pass


def _as_f32(x, shape: tuple[int, ...], what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.shape != shape:
        raise DimensionMismatchError(f"{what}: expected shape {shape}, got {arr.shape}")
    return arr


@dataclass
class FeatureBundle:
    """One sample's feature set; immutable by convention after construction."""

    sample_id: str
    rgb_patch: np.ndarray      # (m, d) float32
    rgb_global: np.ndarray     # (d,) float32
    depth_patch: np.ndarray    # (m, d) float32
    depth_global: np.ndarray   # (d,) float32
    caption_sem: np.ndarray    # (d,) float32
    caption_text: str | None = None

    def __post_init__(self):
        if self.rgb_patch.ndim != 2:
            raise DimensionMismatchError("rgb_patch must be 2-D")
        m, d = self.rgb_patch.shape
        if m < 1 or d < 1:
            raise DimensionMismatchError("patch count and feature dim must be >= 1")
        self.rgb_patch = _as_f32(self.rgb_patch, (m, d), "rgb_patch")
        self.depth_patch = _as_f32(self.depth_patch, (m, d), "depth_patch")
        self.rgb_global = _as_f32(self.rgb_global, (d,), "rgb_global")
        self.depth_global = _as_f32(self.depth_global, (d,), "depth_global")
        self.caption_sem = _as_f32(self.caption_sem, (d,), "caption_sem")
        self.validate()

    @property
    def m(self) -> int:
        return self.rgb_patch.shape[0]

    @property
    def d(self) -> int:
        return self.rgb_patch.shape[1]

    def validate(self) -> None:
        for name in ("rgb_patch", "rgb_global", "depth_patch", "depth_global", "caption_sem"):
            if not np.isfinite(getattr(self, name)).all():
                raise NonFiniteValueError(f"{name} contains NaN or Inf")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.caption_text == other.caption_text
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("rgb_patch", "rgb_global", "depth_patch", "depth_global", "caption_sem")
            )
        )


def _write_str(fp: BinaryIO, s: str) -> int:
    raw = s.encode("utf-8")
    fp.write(struct.pack("<I", len(raw)))
    fp.write(raw)
    return 4 + len(raw)


def save_bundle(bundle: FeatureBundle, destination) -> int:
    """Write the bundle to a path or binary sink; returns bytes written."""
    bundle.validate()
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fp:
            return save_bundle(bundle, fp)
    fp: BinaryIO = destination
    n = 0
    fp.write(MAGIC)
    fp.write(struct.pack("<III", VERSION, bundle.m, bundle.d))
    n += 4 + 12
    n += _write_str(fp, bundle.sample_id)
    if bundle.caption_text is None:
        fp.write(b"\x00")
        n += 1
    else:
        fp.write(b"\x01")
        n += 1
        n += _write_str(fp, bundle.caption_text)
    for arr in (bundle.rgb_patch, bundle.rgb_global, bundle.depth_patch,
                bundle.depth_global, bundle.caption_sem):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        fp.write(raw)
        n += len(raw)
    return n


def _read_exact(fp: BinaryIO, n: int, what: str) -> bytes:
    raw = fp.read(n)
    if len(raw) != n:
        raise TruncatedStreamError(f"stream ended inside {what}")
    return raw


def _read_str(fp: BinaryIO, what: str) -> str:
    (length,) = struct.unpack("<I", _read_exact(fp, 4, f"{what} length"))
    return _read_exact(fp, length, what).decode("utf-8")


def load_bundle(source) -> FeatureBundle:
    """Read a bundle from a path or binary stream; validates on the way in."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fp:
            return load_bundle(fp)
    fp: BinaryIO = source
    magic = fp.read(4)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fp, 4, "version"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    m, d = struct.unpack("<II", _read_exact(fp, 8, "dimensions"))
    if m < 1 or d < 1:
        raise DimensionMismatchError(f"invalid dimensions m={m}, d={d}")
    sample_id = _read_str(fp, "sample_id")
    (flag,) = struct.unpack("<B", _read_exact(fp, 1, "caption flag"))
    caption = _read_str(fp, "caption") if flag == 1 else None

    def read_f32(count: int, what: str) -> np.ndarray:
        raw = _read_exact(fp, count * 4, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    rgb_patch = read_f32(m * d, "rgb_patch").reshape(m, d)
    rgb_global = read_f32(d, "rgb_global")
    depth_patch = read_f32(m * d, "depth_patch").reshape(m, d)
    depth_global = read_f32(d, "depth_global")
    caption_sem = read_f32(d, "caption_sem")
    return FeatureBundle(
        sample_id=sample_id,
        rgb_patch=rgb_patch,
        rgb_global=rgb_global,
        depth_patch=depth_patch,
        depth_global=depth_global,
        caption_sem=caption_sem,
        caption_text=caption,
    )


def bundle_to_bytes(bundle: FeatureBundle) -> bytes:
    buf = io.BytesIO()
    save_bundle(bundle, buf)
    return buf.getvalue()


SCENARIOS = ("uniform", "clustered", "planted")

_PLANTED_FRACTION = 4  # planted set size is m // 4 (at least 1)


def _rng_for(seed: int, m: int, d: int, scenario: str) -> np.random.Generator:
    code = SCENARIOS.index(scenario)
    return np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFF, m, d, code])
    )


def _planted_layout(rng: np.random.Generator, m: int, d: int):
    """Caption direction and planted index set; first draws from the stream."""
    c = rng.standard_normal(d)
    c /= np.linalg.norm(c)
    k_star = max(1, m // _PLANTED_FRACTION)
    idx = rng.permutation(m)[:k_star]
    return c, idx


def planted_indices(seed: int, m: int, d: int) -> np.ndarray:
    """Ground-truth planted patch indices for the 'planted' scenario, sorted."""
    rng = _rng_for(seed, m, d, "planted")
    _, idx = _planted_layout(rng, m, d)
    return np.sort(idx)


def gen_synthetic_bundle(seed: int, m: int, d: int, scenario: str = "uniform") -> FeatureBundle:
    """Deterministic synthetic bundle; stand-in for real extracted features.

    'planted' embeds m//4 patches whose RGB features align with caption_sem
    while all remaining patches are orthogonal to it, so brute-force cosine
    ranking recovers the planted set exactly. Depth is independent noise.
    """
    if m < 1 or d < 1:
        raise ValueError("m and d must be >= 1")
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; pick one of {SCENARIOS}")
    rng = _rng_for(seed, m, d, scenario)
    sample_id = f"{scenario}-{seed}-{m}x{d}"

    if scenario == "uniform":
        rgb_patch = rng.uniform(-1, 1, (m, d))
        depth_patch = rng.uniform(-1, 1, (m, d))
        rgb_global = rng.uniform(-1, 1, d)
        depth_global = rng.uniform(-1, 1, d)
        caption_sem = rng.uniform(-1, 1, d)
        caption = None

    elif scenario == "clustered":
        n_clusters = min(4, m)
        centers_rgb = rng.uniform(-1, 1, (n_clusters, d))
        centers_depth = rng.uniform(-1, 1, (n_clusters, d))
        assign = rng.integers(0, n_clusters, m)
        rgb_patch = centers_rgb[assign] + 0.1 * rng.standard_normal((m, d))
        depth_patch = centers_depth[assign] + 0.1 * rng.standard_normal((m, d))
        rgb_global = centers_rgb.mean(axis=0) + 0.05 * rng.standard_normal(d)
        depth_global = centers_depth.mean(axis=0) + 0.05 * rng.standard_normal(d)
        caption_sem = centers_rgb[0] + 0.05 * rng.standard_normal(d)
        caption = None

    else:  # planted
        c, planted = _planted_layout(rng, m, d)
        rgb_patch = np.empty((m, d))
        mask = np.zeros(m, dtype=bool)
        mask[planted] = True
        for i in range(m):
            if mask[i]:
                v = c + 0.05 * rng.standard_normal(d)
            else:
                v = rng.standard_normal(d)
                v -= (v @ c) * c  # strictly orthogonal to the caption direction
                if np.linalg.norm(v) < 1e-9:
                    v = np.roll(c, 1) - (np.roll(c, 1) @ c) * c
            rgb_patch[i] = v / np.linalg.norm(v)
        depth_patch = rng.uniform(-1, 1, (m, d))
        rgb_global = rgb_patch[planted].mean(axis=0)
        rgb_global /= max(np.linalg.norm(rgb_global), 1e-9)
        depth_global = rng.uniform(-1, 1, d)
        caption_sem = c
        caption = None

    return FeatureBundle(
        sample_id=sample_id,
        rgb_patch=rgb_patch,
        rgb_global=rgb_global,
        depth_patch=depth_patch,
        depth_global=depth_global,
        caption_sem=caption_sem,
        caption_text=caption,
    )
