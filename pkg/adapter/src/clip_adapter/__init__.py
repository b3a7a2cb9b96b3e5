"""Feature export adapter: CLIP encodings in the envfuse bundle format."""

from .extract import (
    CLIP_MEAN,
    CLIP_STD,
    DEFAULT_MODEL,
    ExtractionJob,
    FeatureExtractor,
    byte_tokenizer,
    caption_prompt,
    extract_and_export,
    load_depth,
    load_rgb,
)

__all__ = [
    "CLIP_MEAN",
    "CLIP_STD",
    "DEFAULT_MODEL",
    "ExtractionJob",
    "FeatureExtractor",
    "byte_tokenizer",
    "caption_prompt",
    "extract_and_export",
    "load_depth",
    "load_rgb",
]

__version__ = "0.1.0"
