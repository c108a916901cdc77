"""Figure-caption-context triplet assembly from parsed layouts.

Binding works on the document's logical reading order, which survives
column and page boundaries, so a caption physically separated from its
figure is still reattached. Anything ambiguous is excluded rather than
guessed: precision is preferred over recall throughout this module.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .config import FigureClassRules
from .models import ElementKind, FigureAsset, LayoutDocument, LayoutElement, OcrToken, SubFigure
from .textutil import collapse_whitespace

log = logging.getLogger(__name__)

# Ordered pattern family for figure identifiers. Case-insensitive; each
# pattern must expose named groups: kind, num, and optionally panel.
# A panel letter only counts when directly attached to the number ("2a",
# "2(a)"); "Figure 2 a" or "Figure 2 (a)" read as the bare figure, since a
# spaced "(a)" is normally a sub-caption marker.
DEFAULT_IDENTIFIER_PATTERNS = (
    r"\b(?P<kind>fig(?:ure)?\.?|scheme|schema)\s*(?P<num>\d+)\(\s*(?P<panel>[a-z])\s*\)",
    r"\b(?P<kind>fig(?:ure)?\.?|scheme|schema)\s*(?P<num>\d+)(?P<panel>[a-z])?\b",
)

_DEFAULT_COMPILED = tuple(re.compile(p, re.IGNORECASE) for p in DEFAULT_IDENTIFIER_PATTERNS)

IdentifierKey = tuple[str, int, Optional[str]]


def _canonical_kind(raw: str) -> str:
    kind = raw.lower().rstrip(".")
    return "fig" if kind in ("fig", "figure") else kind


@dataclass(frozen=True)
class IdentifierMatch:
    surface: str
    key: IdentifierKey
    start: int
    end: int


def _scan_identifiers(text: str, patterns: Sequence[re.Pattern]) -> list[IdentifierMatch]:
    """All identifier matches, earlier patterns claiming their spans first."""
    claimed: list[tuple[int, int]] = []
    found: list[IdentifierMatch] = []
    for rx in patterns:
        for m in rx.finditer(text):
            span = m.span()
            if any(not (span[1] <= s or span[0] >= e) for s, e in claimed):
                continue
            claimed.append(span)
            panel = m.groupdict().get("panel")
            key = (
                _canonical_kind(m.group("kind")),
                int(m.group("num")),
                panel.lower() if panel else None,
            )
            found.append(IdentifierMatch(m.group(0).strip(), key, span[0], span[1]))
    found.sort(key=lambda im: im.start)
    return found


def parse_figure_identifiers(
    caption: str, patterns: Optional[Sequence[re.Pattern]] = None
) -> list[str]:
    """Identifier tokens in first-occurrence order, deduplicated.

    Dedup is by canonical key, so "Figure 3" and a later "Fig. 3" collapse
    to the first surface form while "Figure 3" and "Figure 3b" stay apart.
    """
    matches = _scan_identifiers(caption, patterns or _DEFAULT_COMPILED)
    seen: set[IdentifierKey] = set()
    out: list[str] = []
    for m in matches:
        if m.key not in seen:
            seen.add(m.key)
            out.append(m.surface)
    return out


def identifier_keys(
    identifiers: Sequence[str], patterns: Optional[Sequence[re.Pattern]] = None
) -> set[IdentifierKey]:
    keys: set[IdentifierKey] = set()
    for ident in identifiers:
        for m in _scan_identifiers(ident, patterns or _DEFAULT_COMPILED):
            keys.add(m.key)
    return keys


def _mention_matches(mention: IdentifierKey, identifier: IdentifierKey) -> bool:
    # A bare mention ("Figure 3") contextualizes every panel of the figure;
    # a panel mention only matches its own panel identifier.
    if mention[0] != identifier[0] or mention[1] != identifier[1]:
        return False
    return mention[2] is None or mention[2] == identifier[2]


def extract_contexts(
    doc: LayoutDocument,
    identifiers: Sequence[str],
    patterns: Optional[Sequence[re.Pattern]] = None,
) -> list[str]:
    """Whole paragraphs that mention any of the given identifiers.

    Paragraph text is returned byte-exact, in reading order, deduplicated.
    Only paragraph elements are scanned, so a caption can never return
    itself as context.
    """
    rx = patterns or _DEFAULT_COMPILED
    wanted = identifier_keys(identifiers, rx)
    if not wanted:
        return []
    out: list[str] = []
    seen: set[str] = set()
    for el in doc.sorted_elements():
        if el.kind is not ElementKind.paragraph or not el.text:
            continue
        mentions = {m.key for m in _scan_identifiers(el.text, rx)}
        if any(_mention_matches(m, ident) for m in mentions for ident in wanted):
            if el.text not in seen:
                seen.add(el.text)
                out.append(el.text)
    return out


@dataclass
class BoundPair:
    figure: LayoutElement
    caption: LayoutElement


@dataclass
class ExcludedFigure:
    figure: LayoutElement
    reason: str


@dataclass
class BindingResult:
    bound: list[BoundPair]
    excluded: list[ExcludedFigure]


def bind_figure_captions(
    doc: LayoutDocument,
    window: int = 2,
    confidence_threshold: float = 0.5,
) -> BindingResult:
    """Pair each figure with at most one caption using reading-order adjacency.

    Candidates are caption elements within `window` positions of the figure
    in the reading-order sequence. Each figure prefers the closest candidate,
    following over preceding on distance ties (captions normally sit under
    their figure). Two figures preferring the same caption is a one-to-many
    conflict and excludes them all; low confidence on either side excludes
    the pair.
    """
    elements = doc.sorted_elements()
    position = {el.reading_order_index: i for i, el in enumerate(elements)}
    captions = [(i, el) for i, el in enumerate(elements) if el.kind is ElementKind.caption]

    bound: list[BoundPair] = []
    excluded: list[ExcludedFigure] = []
    claims: dict[int, list[LayoutElement]] = {}

    for el in elements:
        if el.kind is not ElementKind.figure:
            continue
        if el.confidence < confidence_threshold:
            excluded.append(ExcludedFigure(el, "low confidence"))
            continue
        fig_pos = position[el.reading_order_index]
        candidates = [(i, cap) for i, cap in captions if abs(i - fig_pos) <= window]
        if not candidates:
            excluded.append(ExcludedFigure(el, "no caption candidate"))
            continue
        pos, _cap = min(candidates, key=lambda ic: (abs(ic[0] - fig_pos), 0 if ic[0] > fig_pos else 1))
        claims.setdefault(pos, []).append(el)

    for pos in sorted(claims):
        figures = claims[pos]
        caption = elements[pos]
        if len(figures) > 1:
            for fig in figures:
                excluded.append(ExcludedFigure(fig, "ambiguous binding"))
            continue
        if caption.confidence < confidence_threshold:
            excluded.append(ExcludedFigure(figures[0], "low confidence"))
            continue
        bound.append(BoundPair(figures[0], caption))

    bound.sort(key=lambda pair: pair.figure.reading_order_index)
    excluded.sort(key=lambda ex: ex.figure.reading_order_index)
    return BindingResult(bound=bound, excluded=excluded)


_PANEL_FRAGMENT = re.compile(r"\(\s*([A-Za-z])\s*\)")


def _parse_subcaption_fragments(caption: str) -> dict[str, str]:
    """Map panel letters to the caption fragment each "(a)"-style marker opens."""
    markers = list(_PANEL_FRAGMENT.finditer(caption))
    fragments: dict[str, str] = {}
    for idx, m in enumerate(markers):
        letter = m.group(1).lower()
        end = markers[idx + 1].start() if idx + 1 < len(markers) else len(caption)
        fragment = caption[m.end():end].strip().lstrip(":,- ").rstrip("; ,")
        if letter not in fragments:
            fragments[letter] = collapse_whitespace(fragment)
    return fragments


def _normalize_token_label(text: str) -> Optional[str]:
    cleaned = text.strip().strip("()[].")
    if len(cleaned) == 1 and cleaned.isalpha():
        return cleaned.lower()
    return None


def classify_semantic_type(text: str, rules: FigureClassRules) -> str:
    for rule in rules.semantic_types:
        for kw in rule.keywords:
            if re.search(rf"\b{re.escape(kw)}\b", text, re.IGNORECASE):
                return rule.type
    return "unknown"


def map_subfigures(
    figure: FigureAsset,
    ocr_tokens: Sequence[OcrToken],
    caption: str,
    rules: FigureClassRules,
) -> FigureAsset:
    """Populate sub-figure panels from OCR'd letter tokens and the caption.

    Panels need visual evidence: a caption fragment "(c)" without an OCR
    token "c" produces nothing. Duplicate letters keep the first token in
    raster order. The token bbox stands in for the panel bbox, which is the
    only localization the OCR layer provides.
    """
    fragments = _parse_subcaption_fragments(caption)
    panels: list[SubFigure] = []
    taken: set[str] = set()
    for token in sorted(ocr_tokens, key=lambda t: (t.bbox[1], t.bbox[0])):
        label = _normalize_token_label(token.text)
        if label is None:
            continue
        if label in taken:
            log.info("figure %s: duplicate panel token %r dropped", figure.figure_id, token.text)
            continue
        taken.add(label)
        sub_caption = fragments.get(label, "")
        semantic = classify_semantic_type(sub_caption, rules) if sub_caption else "unknown"
        panels.append(
            SubFigure(
                panel_bbox=token.bbox,
                label=label,
                sub_caption=sub_caption,
                semantic_type=semantic,
            )
        )
    return figure.model_copy(update={"subfigures": panels})


_URL = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_BARE_DOI = re.compile(r"\b10\.\d{4,9}/\S+")
_BOILERPLATE = (
    re.compile(r"©[^.;]*[.;]?"),
    re.compile(r"\bcopyright\b[^.;]*[.;]?", re.IGNORECASE),
    re.compile(r"\ball rights reserved\b[.;]?", re.IGNORECASE),
    re.compile(r"\b(?:reproduced|reprinted|adapted) (?:with|by) permission\b[^.;]*[.;]?", re.IGNORECASE),
)


def sanitize_caption(caption: str) -> str:
    """Strip URLs, DOIs, rights boilerplate, and control characters.

    Unicode letters, sub/superscripts, Greek, and math operators pass
    through untouched; removals leave a space so words never fuse, and
    whitespace is collapsed at the end. Idempotent.
    """
    text = _URL.sub(" ", caption)
    text = _BARE_DOI.sub(" ", text)
    for rx in _BOILERPLATE:
        text = rx.sub(" ", text)
    out = []
    for ch in text:
        if ch.isspace():
            out.append(" ")
        elif ch.isprintable():
            out.append(ch)
        # control and other unprintable characters are dropped
    return collapse_whitespace("".join(out))
