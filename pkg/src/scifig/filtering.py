"""Figure- and caption-level quality filters, including p-hash dedup.

Hash recipe (algorithm tag "dct32-8x8-median-v1", kept stable so hashes
are reproducible across implementations): resize to 32x32 grayscale with
Lanczos, 2-D orthonormal DCT, take the top-left 8x8 coefficient block,
set bit i (row-major, MSB first) when the coefficient strictly exceeds
the block median. Strict comparison makes constant images hash to a
stable value instead of depending on tie noise.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from PIL import Image
from pydantic import BaseModel
from scipy.fft import dct

from .config import FilterConfig
from .models import FigureAsset, FilterDecision, Triplet
from .textutil import word_count

DEFAULT_ALGORITHM_TAG = "dct32-8x8-median-v1"

TERMINAL_PUNCTUATION = frozenset({".", ";", "!", "?"})


class ImageDecodeError(ValueError):
    """The referenced image could not be decoded."""


class PerceptualHash(BaseModel):
    bits: int
    algorithm_tag: str = DEFAULT_ALGORITHM_TAG


def load_grayscale(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float64)
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc


def phash(pixels: np.ndarray, algorithm_tag: str = DEFAULT_ALGORITHM_TAG) -> PerceptualHash:
    """64-bit DCT perceptual hash of a grayscale pixel matrix."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("phash expects a 2-D grayscale matrix")
    if min(arr.shape) < 8:
        raise ValueError("phash needs a minimum dimension of 8 pixels")
    small = Image.fromarray(arr.astype(np.float32), mode="F").resize((32, 32), Image.Resampling.LANCZOS)
    coeffs = dct(dct(np.asarray(small, dtype=np.float64), axis=0, norm="ortho"), axis=1, norm="ortho")
    block = coeffs[:8, :8]
    median = float(np.median(block))
    bits = 0
    for value in block.flatten():
        bits = (bits << 1) | int(value > median)
    return PerceptualHash(bits=bits, algorithm_tag=algorithm_tag)


def phash_file(path: str | Path, algorithm_tag: str = DEFAULT_ALGORITHM_TAG) -> PerceptualHash:
    return phash(load_grayscale(path), algorithm_tag)


def phash_similarity(a: PerceptualHash, b: PerceptualHash) -> float:
    """1 - normalized Hamming distance over the 64 hash bits."""
    if a.algorithm_tag != b.algorithm_tag:
        raise ValueError(f"algorithm_tag mismatch: {a.algorithm_tag!r} vs {b.algorithm_tag!r}")
    return 1.0 - (a.bits ^ b.bits).bit_count() / 64.0


def dedup_figures_within_article(
    figures: list[FigureAsset],
    hashes: Mapping[str, PerceptualHash],
    cfg: FilterConfig,
) -> tuple[list[FigureAsset], list[tuple[str, str]]]:
    """Greedy first-wins near-duplicate removal within one article.

    A figure whose similarity to any earlier kept figure reaches the
    threshold is dropped with a reference to that figure. Callers handle
    decode failures before this point; every figure here must have a hash.
    """
    kept: list[FigureAsset] = []
    dropped: list[tuple[str, str]] = []
    for fig in figures:
        h = hashes[fig.figure_id]
        duplicate_of: Optional[str] = None
        for earlier in kept:
            if phash_similarity(h, hashes[earlier.figure_id]) >= cfg.phash_similarity_threshold:
                duplicate_of = earlier.figure_id
                break
        if duplicate_of is None:
            kept.append(fig)
        else:
            dropped.append((fig.figure_id, f"near-duplicate of {duplicate_of}"))
    return kept, dropped


def figure_quality_filter(figure: FigureAsset, cfg: FilterConfig) -> FilterDecision:
    """Reject undersized images and extreme aspect ratios; 200x200 is accepted."""
    if figure.width_px < cfg.min_width_px or figure.height_px < cfg.min_height_px:
        return FilterDecision(accepted=False, reason="resolution")
    ratio = max(figure.width_px / figure.height_px, figure.height_px / figure.width_px)
    if ratio > cfg.max_aspect_ratio:
        return FilterDecision(accepted=False, reason="aspect")
    return FilterDecision(accepted=True)


def caption_quality_filter(triplet: Triplet, cfg: FilterConfig) -> FilterDecision:
    """Caption completeness rules, applied after sanitization.

    Short captions are only fatal when no in-text context backs them up;
    the capitalization check looks at the first alphabetic character so
    formula-led captions like "2D materials ..." survive.
    """
    caption = triplet.raw_caption
    if word_count(caption) <= cfg.min_caption_words_without_context and not triplet.contexts:
        return FilterDecision(accepted=False, reason="too short, no context")
    first_alpha = next((ch for ch in caption if ch.isalpha()), None)
    if first_alpha is None or not first_alpha.isupper():
        return FilterDecision(accepted=False, reason="capitalization")
    if not caption or caption[-1] not in TERMINAL_PUNCTUATION:
        return FilterDecision(accepted=False, reason="punctuation")
    return FilterDecision(accepted=True)
