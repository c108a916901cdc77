"""Document metadata ingestion: source gates, discipline mapping, dedup.

All operations are pure over DocumentRecord values; dedup is the only one
that needs the whole record set at once.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import re
import unicodedata
from typing import Callable, Optional

from .config import TaxonomyConfig
from .models import DocumentRecord, SourceClass
from .textutil import collapse_whitespace

log = logging.getLogger(__name__)

UNMAPPED_FLAG = "unmapped"
UNUSABLE_TITLE_FLAG = "unusable title"

# Resolver: prompt text in, model reply text out. Raises on transport failure.
DisciplineResolver = Callable[[str], str]


class MissingMetadataError(ValueError):
    """A preprint record lacks the fields the dual gate needs."""


def normalize_title(title: str) -> str:
    """Lowercase, replace punctuation with spaces, collapse whitespace.

    Punctuation maps to a space rather than the empty string so "A:B" does
    not fuse into a single token. May return "" for all-punctuation input;
    callers flag such records instead of crashing.
    """
    out = []
    for ch in title.lower():
        if unicodedata.category(ch).startswith("P"):
            out.append(" ")
        else:
            out.append(ch)
    return collapse_whitespace("".join(out))


_DOI_PREFIX = re.compile(r"^https?://(?:dx\.)?doi\.org/", re.IGNORECASE)


def canonical_doi(doi: Optional[str]) -> Optional[str]:
    """Case-insensitive DOI with any doi.org URL prefix stripped."""
    if doi is None:
        return None
    cleaned = _DOI_PREFIX.sub("", doi.strip())
    return cleaned.lower() or None


def preprint_gate(record: DocumentRecord) -> bool:
    """Dual gate for preprints: cited at least once and in the top 20% by downloads.

    Journal records bypass the gate. Preprints missing either field raise
    MissingMetadataError; the ingest stage turns that into a rejection with
    reason "insufficient metadata".
    """
    if record.source_class is SourceClass.journal:
        return True
    if record.citation_count is None or record.download_rank_percentile is None:
        raise MissingMetadataError(record.doc_id)
    return record.citation_count >= 1 and record.download_rank_percentile <= 0.20


def _winner_key(record: DocumentRecord):
    date = record.version_date or dt.date.min
    return (
        0 if record.source_class is SourceClass.journal else 1,
        -date.toordinal(),
        record.doc_id,
    )


def dedup_documents(
    records: list[DocumentRecord],
) -> tuple[list[DocumentRecord], list[tuple[str, str]]]:
    """Drop records sharing a DOI or normalized title with a better version.

    Collision groups are transitive (a DOI match and a title match chain
    together). Within a group the journal version beats any preprint, then
    the latest version_date, then the lexicographically smallest doc_id.
    Returns (kept, dropped) where each dropped entry is (doc_id, reason)
    and the reason names the winning doc_id.
    """
    parent = list(range(len(records)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri

    by_doi: dict[str, int] = {}
    by_title: dict[str, int] = {}
    for i, rec in enumerate(records):
        doi = canonical_doi(rec.doi)
        if doi is not None:
            if doi in by_doi:
                union(by_doi[doi], i)
            else:
                by_doi[doi] = i
        title = rec.normalized_title
        if title:
            if title in by_title:
                union(by_title[title], i)
            else:
                by_title[title] = i

    groups: dict[int, list[int]] = {}
    for i in range(len(records)):
        groups.setdefault(find(i), []).append(i)

    kept: list[DocumentRecord] = []
    dropped: list[tuple[str, str]] = []
    drop_reasons: dict[int, str] = {}
    winners: set[int] = set()
    for members in groups.values():
        winner = min(members, key=lambda i: _winner_key(records[i]))
        winners.add(winner)
        for i in members:
            if i != winner:
                drop_reasons[i] = f"duplicate of {records[winner].doc_id}"
    for i, rec in enumerate(records):
        if i in winners:
            kept.append(rec)
        else:
            dropped.append((rec.doc_id, drop_reasons[i]))
    return kept, dropped


def _parse_resolver_reply(reply: str) -> list[str]:
    text = reply.strip()
    if text.startswith("["):
        try:
            parsed = json.loads(text)
            if isinstance(parsed, list):
                return [str(item) for item in parsed]
        except json.JSONDecodeError:
            pass
    return [part for part in re.split(r"[;,\n]+", text) if part.strip()]


def normalize_discipline(
    record: DocumentRecord,
    resolver: DisciplineResolver,
    taxonomy: TaxonomyConfig,
) -> tuple[list[str], bool]:
    """Map a record's subject data onto the closed taxonomy via the resolver.

    Returns (labels, mapped). When the resolver fails, replies with nothing,
    or emits any label outside the taxonomy, the record's raw disciplines
    come back with mapped=False and the caller flags the record "unmapped".
    """
    prompt = taxonomy.resolver_prompt.format(
        labels=", ".join(taxonomy.labels),
        title=record.title,
        subjects="; ".join(record.raw_subjects) or "(none)",
    )
    try:
        reply = resolver(prompt)
    except Exception as exc:
        log.warning("discipline resolver failed for %s: %s", record.doc_id, exc)
        return list(record.disciplines), False

    labels: list[str] = []
    for candidate in _parse_resolver_reply(reply):
        canonical = taxonomy.canonical(candidate)
        if canonical is None:
            return list(record.disciplines), False
        if canonical not in labels:
            labels.append(canonical)
    if not labels:
        return list(record.disciplines), False
    return labels, True


class IngestResult:
    def __init__(self) -> None:
        self.kept: list[DocumentRecord] = []
        self.dropped: list[tuple[str, str]] = []


def ingest_records(
    records: list[DocumentRecord],
    taxonomy: TaxonomyConfig,
    resolver: Optional[DisciplineResolver] = None,
    license_denylist: tuple[str, ...] | list[str] = (),
) -> IngestResult:
    """Run the full metadata stage: normalize, gate, map disciplines, dedup."""
    result = IngestResult()
    denied = {item.lower() for item in license_denylist}
    survivors: list[DocumentRecord] = []
    for rec in records:
        rec = rec.model_copy(deep=True)
        rec.normalized_title = normalize_title(rec.title)
        if not rec.normalized_title and UNUSABLE_TITLE_FLAG not in rec.flags:
            rec.flags.append(UNUSABLE_TITLE_FLAG)
        if rec.license.lower() in denied:
            result.dropped.append((rec.doc_id, "license denied"))
            continue
        try:
            passed = preprint_gate(rec)
        except MissingMetadataError:
            result.dropped.append((rec.doc_id, "insufficient metadata"))
            continue
        if not passed:
            result.dropped.append((rec.doc_id, "failed preprint gate"))
            continue
        if resolver is not None:
            labels, mapped = normalize_discipline(rec, resolver, taxonomy)
            rec.disciplines = labels
            if not mapped and UNMAPPED_FLAG not in rec.flags:
                rec.flags.append(UNMAPPED_FLAG)
        survivors.append(rec)
    kept, dropped = dedup_documents(survivors)
    result.kept = kept
    result.dropped.extend(dropped)
    return result
