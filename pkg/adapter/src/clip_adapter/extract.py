"""CLIP feature extraction for RGB-D panorama bundles.

Turns an RGB panorama, its depth map, and an operator-written caption into
the feature bundle the fusion pipeline consumes: per-patch and global
embeddings for both modalities plus the caption's semantic vector, all
mapped into the model's shared projection space.

Only the export side lives here; reading bundles back and everything
downstream belongs to envfuse.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from envfuse import FeatureBundle, save_bundle

DEFAULT_MODEL = "openai/clip-vit-large-patch14"

# Channel statistics the image encoder was trained with.
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

_MEAN = np.asarray(CLIP_MEAN, dtype=np.float32)
_STD = np.asarray(CLIP_STD, dtype=np.float32)

_PROMPT = (
    "Observe this panoramic image and briefly describe its content. "
    "Identify the objects in the image in one to two sentences, focusing "
    "only on key information and avoiding descriptive words."
)


def caption_prompt() -> str:
    """Instruction handed to whoever (or whatever) writes the captions.

    Pinned here rather than in docs on purpose: captions produced under
    different wordings are not comparable, so the text must never drift.
    """
    return _PROMPT


@dataclass(frozen=True)
class ExtractionJob:
    """One extraction request: where to read, what caption, where to write."""

    rgb: Path
    depth: Path
    caption: str
    out: Path
    device: str = "cpu"

    def __post_init__(self):
        object.__setattr__(self, "rgb", Path(self.rgb))
        object.__setattr__(self, "depth", Path(self.depth))
        object.__setattr__(self, "out", Path(self.out))
        if not self.caption or not self.caption.strip():
            raise ValueError("caption must be non-empty")


def load_rgb(path, size: int) -> torch.Tensor:
    """Decode an RGB image into a (1, 3, size, size) encoder-ready tensor.

    Panoramas are resized, never centre-cropped: cropping would discard
    part of the scene, and the encoder tolerates the aspect distortion.
    """
    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.Resampling.BICUBIC)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - _MEAN) / _STD
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def load_depth(path, size: int) -> torch.Tensor:
    """Decode a depth map into a 3-channel tensor the RGB encoder accepts.

    Depth has no colour statistics of its own, so: resize (bilinear, since
    cubic overshoots at depth discontinuities), min-max to [0, 1] with a
    constant map becoming zeros, replicate across 3 channels, then
    standardize exactly like an RGB input.
    """
    with Image.open(path) as im:
        im = im.convert("F").resize((size, size), Image.Resampling.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    lo, hi = float(arr.min()), float(arr.max())
    arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    arr = np.repeat(arr[:, :, None], 3, axis=2)
    arr = (arr - _MEAN) / _STD
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def byte_tokenizer(vocab_size: int, max_length: int = 77) -> Callable[[str], torch.Tensor]:
    """Tokenizer of last resort: raw utf-8 bytes bracketed by BOS/EOS.

    EOS takes the top id in the vocabulary so both pooling rules in
    circulation (first-EOS and argmax-over-ids) land on the same token.
    """
    if vocab_size < 258:
        raise ValueError("byte fallback needs at least 258 ids")
    bos, eos = vocab_size - 2, vocab_size - 1

    def tokenize(text: str) -> torch.Tensor:
        ids = list(text.encode("utf-8"))[: max_length - 2]
        return torch.tensor([[bos, *ids, eos]], dtype=torch.long)

    return tokenize


def _tokenizer_usable(tok, vocab_size: int) -> bool:
    # Behavioral probe: distinct same-length strings must encode to
    # distinct in-range ids, which a vocab-less tokenizer cannot do.
    try:
        a = tok("abcd", return_tensors="pt")["input_ids"]
        b = tok("wxyz", return_tensors="pt")["input_ids"]
    except Exception:
        return False
    if int(a.min()) < 0 or int(a.max()) >= vocab_size:
        return False
    return a.shape != b.shape or not bool((a == b).all())


class FeatureExtractor:
    """CLIP wrapper exposing the three feature views a bundle needs.

    The model's own pooled outputs cover only the class token; patch
    features are pushed through the same final layernorm and projection so
    every row of the bundle lives in one embedding space.
    """

    def __init__(self, model, tokenize: Callable[[str], torch.Tensor], device: str = "cpu"):
        self.model = model.to(device).eval()
        self.tokenize = tokenize
        self.device = device
        self.image_size = int(model.config.vision_config.image_size)

    @classmethod
    def from_pretrained(cls, name_or_dir: str = DEFAULT_MODEL, device: str = "cpu") -> "FeatureExtractor":
        from transformers import AutoTokenizer, CLIPModel

        model = CLIPModel.from_pretrained(name_or_dir)
        vocab = int(model.config.text_config.vocab_size)
        try:
            tok = AutoTokenizer.from_pretrained(name_or_dir)
        except (OSError, ValueError):
            tok = None
        if tok is None or not _tokenizer_usable(tok, vocab):
            # Weights without real tokenizer files (common for locally
            # saved models) yield either an exception or a degenerate
            # everything-is-unk tokenizer; degrade to bytes instead.
            print(f"warning: no usable tokenizer at {name_or_dir}, using byte fallback", file=sys.stderr)
            return cls(model, byte_tokenizer(vocab), device)

        def tokenize(text: str) -> torch.Tensor:
            return tok(text, truncation=True, max_length=tok.model_max_length, return_tensors="pt")["input_ids"]

        return cls(model, tokenize, device)

    @torch.no_grad()
    def encode_image(self, pixels: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        """Run one image; return (patch_features, global_feature).

        Patch features are the projected final-layer patch tokens; the
        global feature is the projected class token and matches the
        model's own image embedding bit for bit.
        """
        vm = self.model.vision_model
        tokens = vm(pixel_values=pixels.to(self.device)).last_hidden_state
        projected = self.model.visual_projection(vm.post_layernorm(tokens))[0]
        arr = projected.cpu().numpy()
        return arr[1:], arr[0]

    @torch.no_grad()
    def encode_text(self, text: str) -> np.ndarray:
        """Caption to one semantic vector via the text tower's pooled token."""
        ids = self.tokenize(text).to(self.device)
        pooled = self.model.text_model(input_ids=ids).pooler_output
        return self.model.text_projection(pooled)[0].cpu().numpy()


def extract_and_export(job: ExtractionJob, extractor: FeatureExtractor) -> FeatureBundle:
    """Extract all five feature blocks for one sample and write the bundle.

    Returns the bundle that was written, which is handy for logging.
    """
    rgb = load_rgb(job.rgb, extractor.image_size)
    depth = load_depth(job.depth, extractor.image_size)
    rgb_patch, rgb_global = extractor.encode_image(rgb)
    depth_patch, depth_global = extractor.encode_image(depth)
    caption_sem = extractor.encode_text(job.caption)
    bundle = FeatureBundle(
        sample_id=job.out.stem,
        rgb_patch=rgb_patch,
        rgb_global=rgb_global,
        depth_patch=depth_patch,
        depth_global=depth_global,
        caption_sem=caption_sem,
        caption_text=job.caption,
    )
    job.out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, job.out)
    return bundle
