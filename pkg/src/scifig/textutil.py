"""Shared text primitives.

Word counting lives here and only here: the caption-length filter, the
generation length gate, and corpus statistics must agree on boundaries,
so they all import this tokenizer.
"""

from __future__ import annotations

import hashlib
import re

_WS = re.compile(r"\s+")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_FENCE = re.compile(r"\A```[^\n]*\n(.*?)\n?```\s*\Z", re.DOTALL)


def word_count(text: str) -> int:
    """Count whitespace-delimited tokens."""
    return len(text.split())


def collapse_whitespace(text: str) -> str:
    return _WS.sub(" ", text).strip()


def split_sentences(text: str) -> list[str]:
    """Naive sentence split on terminal punctuation followed by whitespace."""
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def strip_code_fence(text: str) -> str:
    """Remove a code fence wrapping the entire payload, if present.

    Inner fences are left alone; only a whole-payload wrapper is stripped.
    """
    stripped = text.strip()
    m = _FENCE.match(stripped)
    if m:
        return m.group(1).strip()
    return stripped


def stable_seed(*parts: object) -> int:
    """Derive a reproducible 64-bit seed from arbitrary parts.

    Built on sha256 so results do not depend on PYTHONHASHSEED.
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big")
