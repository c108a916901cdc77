from __future__ import annotations

import datetime as dt
import unicodedata

import pytest
from hypothesis import given
from hypothesis import strategies as st

from scifig.config import load_taxonomy
from scifig.metadata import (
    MissingMetadataError,
    canonical_doi,
    dedup_documents,
    ingest_records,
    normalize_discipline,
    normalize_title,
    preprint_gate,
)
from scifig.models import SourceClass

from conftest import make_record


def oracle_normalize_title(title: str) -> str:
    """Character-class oracle: enumerate the input, mapping punctuation to
    spaces via unicodedata categories, then collapse with str.split."""
    chars = []
    for ch in title.lower():
        chars.append(" " if unicodedata.category(ch).startswith("P") else ch)
    return " ".join("".join(chars).split())


class TestNormalizeTitle:
    def test_spec_example(self):
        assert normalize_title("The  Title: A Study!") == "the title a study"

    def test_already_normalized(self):
        assert normalize_title("abc") == "abc"

    def test_punctuation_replacement_rule(self):
        # em dash and semicolon become spaces, so words never fuse
        expected = oracle_normalize_title("A—B;  C")
        assert expected == "a b c"
        assert normalize_title("A—B;  C") == expected

    def test_empty_after_normalization(self):
        assert normalize_title("!!! ... ???") == ""

    @given(st.text(max_size=80))
    def test_idempotent(self, title):
        once = normalize_title(title)
        assert normalize_title(once) == once

    @given(st.text(max_size=80))
    def test_matches_character_class_oracle(self, title):
        assert normalize_title(title) == oracle_normalize_title(title)


class TestCanonicalDoi:
    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("10.1000/ABC", "10.1000/abc"),
            ("https://doi.org/10.1000/abc", "10.1000/abc"),
            ("http://dx.doi.org/10.1000/Abc", "10.1000/abc"),
            ("  10.1/x  ", "10.1/x"),
            (None, None),
        ],
    )
    def test_cases(self, raw, expected):
        assert canonical_doi(raw) == expected


class TestPreprintGate:
    def test_boundary_passes(self):
        rec = make_record("p1", source_class=SourceClass.preprint, citation_count=1, download_rank_percentile=0.20)
        assert preprint_gate(rec) is True

    def test_zero_citations_fails(self):
        rec = make_record("p2", source_class=SourceClass.preprint, citation_count=0, download_rank_percentile=0.01)
        assert preprint_gate(rec) is False

    def test_percentile_above_cutoff_fails(self):
        rec = make_record("p3", source_class=SourceClass.preprint, citation_count=5, download_rank_percentile=0.21)
        assert preprint_gate(rec) is False

    def test_journal_bypasses(self):
        rec = make_record("j1", citation_count=None, download_rank_percentile=None)
        assert preprint_gate(rec) is True

    def test_missing_metadata_rejected(self):
        rec = make_record("p4", source_class=SourceClass.preprint, citation_count=None)
        with pytest.raises(MissingMetadataError):
            preprint_gate(rec)

    @given(
        citations=st.integers(min_value=0, max_value=50),
        percentile=st.floats(min_value=0.0, max_value=1.0),
        more_citations=st.integers(min_value=0, max_value=50),
        lower_percentile=st.floats(min_value=0.0, max_value=1.0),
    )
    def test_monotone(self, citations, percentile, more_citations, lower_percentile):
        # raising citations or lowering the percentile never flips true -> false
        base = make_record(
            "m",
            source_class=SourceClass.preprint,
            citation_count=citations,
            download_rank_percentile=percentile,
        )
        better = make_record(
            "m2",
            source_class=SourceClass.preprint,
            citation_count=citations + more_citations,
            download_rank_percentile=min(percentile, lower_percentile),
        )
        if preprint_gate(base):
            assert preprint_gate(better)


def oracle_collides(a, b) -> bool:
    doi_a, doi_b = canonical_doi(a.doi), canonical_doi(b.doi)
    if doi_a is not None and doi_a == doi_b:
        return True
    return bool(a.normalized_title) and a.normalized_title == b.normalized_title


def with_normalized(rec):
    return rec.model_copy(update={"normalized_title": normalize_title(rec.title)})


class TestDedup:
    def test_journal_beats_preprint_on_shared_doi(self):
        journal = with_normalized(make_record("jx", doi="10.1/d1", title="alpha one"))
        preprint = with_normalized(
            make_record(
                "py",
                doi="10.1/d1",
                title="totally different title",
                source_class=SourceClass.preprint,
                citation_count=2,
                download_rank_percentile=0.05,
            )
        )
        kept, dropped = dedup_documents([preprint, journal])
        assert [r.doc_id for r in kept] == ["jx"]
        assert dropped == [("py", "duplicate of jx")]

    def test_single_record_unchanged(self):
        rec = with_normalized(make_record("solo"))
        kept, dropped = dedup_documents([rec])
        assert kept == [rec] and dropped == []

    def test_latest_version_wins_within_class(self):
        old = with_normalized(make_record("old", title="same title", version_date=dt.date(2024, 1, 1)))
        new = with_normalized(make_record("new", title="same title", version_date=dt.date(2025, 6, 1)))
        kept, dropped = dedup_documents([old, new])
        assert [r.doc_id for r in kept] == ["new"]
        assert dropped == [("old", "duplicate of new")]

    def test_full_tie_keeps_smallest_doc_id(self):
        a = with_normalized(make_record("b-doc", title="tie title"))
        b = with_normalized(make_record("a-doc", title="tie title"))
        kept, _ = dedup_documents([a, b])
        assert [r.doc_id for r in kept] == ["a-doc"]

    def test_planted_collisions_fixture(self):
        # 100 records, 20 of which collide with a unique base record (10 by
        # DOI, 10 by title); brute-force pairwise check below fixes the truth.
        records = []
        for i in range(80):
            records.append(
                with_normalized(
                    make_record(f"base{i:02d}", doi=f"10.9/{i}", title=f"unique title number {i}")
                )
            )
        for i in range(10):  # DOI collisions with base00..base09
            records.append(
                with_normalized(
                    make_record(
                        f"doidup{i:02d}",
                        doi=f"10.9/{i}",
                        title=f"doi duplicate variant {i}",
                        source_class=SourceClass.preprint,
                        citation_count=1,
                        download_rank_percentile=0.1,
                    )
                )
            )
        for i in range(10):  # title collisions with base10..base19
            records.append(
                with_normalized(
                    make_record(
                        f"titledup{i:02d}",
                        doi=f"10.9/dup-{i}",
                        title=f"Unique Title, Number {i + 10}!",
                        version_date=dt.date(2020, 1, 1),
                    )
                )
            )
        assert len(records) == 100
        collisions = sum(
            1
            for i in range(len(records))
            for j in range(i + 1, len(records))
            if oracle_collides(records[i], records[j])
        )
        assert collisions == 20

        kept, dropped = dedup_documents(records)
        assert len(kept) == 80
        assert len(dropped) == 20
        # every survivor pair is collision-free per the oracle
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert not oracle_collides(kept[i], kept[j])

    def test_partition_and_permutation_invariance(self):
        records = [
            with_normalized(make_record("r1", doi="10.2/x", title="one")),
            with_normalized(make_record("r2", doi="10.2/x", title="two", source_class=SourceClass.preprint, citation_count=1, download_rank_percentile=0.1)),
            with_normalized(make_record("r3", title="three")),
            with_normalized(make_record("r4", title="three", version_date=dt.date(2026, 1, 1))),
            with_normalized(make_record("r5", title="five")),
        ]
        kept, dropped = dedup_documents(records)
        kept_ids = [r.doc_id for r in kept]
        dropped_ids = [d for d, _ in dropped]
        assert not set(kept_ids) & set(dropped_ids)
        assert sorted(kept_ids + dropped_ids) == sorted(r.doc_id for r in records)
        reversed_kept, _ = dedup_documents(list(reversed(records)))
        assert {r.doc_id for r in reversed_kept} == {r.doc_id for r in kept}

    def test_unusable_titles_do_not_collide(self):
        a = with_normalized(make_record("ua", title="???", doi="10.5/a"))
        b = with_normalized(make_record("ub", title="!!!", doi="10.5/b"))
        kept, _ = dedup_documents([a, b])
        assert len(kept) == 2


class TestNormalizeDiscipline:
    def setup_method(self):
        self.taxonomy = load_taxonomy(None)

    def test_passthrough_of_mocked_label(self):
        rec = make_record("d1", raw_subjects=["condensed matter"])
        labels, mapped = normalize_discipline(rec, lambda prompt: "Materials Science", self.taxonomy)
        assert labels == ["Materials Science"] and mapped is True

    def test_label_outside_taxonomy_flags_unmapped(self):
        rec = make_record("d2", disciplines=["raw-label"])
        labels, mapped = normalize_discipline(rec, lambda prompt: "Astrology", self.taxonomy)
        assert labels == ["raw-label"] and mapped is False

    def test_resolver_failure_keeps_raw_labels(self):
        rec = make_record("d3", disciplines=["raw-label"])

        def broken(prompt: str) -> str:
            raise TimeoutError("unreachable")

        labels, mapped = normalize_discipline(rec, broken, self.taxonomy)
        assert labels == ["raw-label"] and mapped is False

    def test_multiple_labels_parsed(self):
        rec = make_record("d4")
        labels, mapped = normalize_discipline(
            rec, lambda prompt: "Chemistry; Materials Science", self.taxonomy
        )
        assert labels == ["Chemistry", "Materials Science"] and mapped is True


class TestIngest:
    def test_full_stage(self):
        taxonomy = load_taxonomy(None)
        records = [
            make_record("keep1", doi="10.7/a", title="first survivor"),
            make_record(
                "gated",
                doi="10.7/b",
                title="preprint below gate",
                source_class=SourceClass.preprint,
                citation_count=0,
                download_rank_percentile=0.01,
            ),
            make_record(
                "nometa",
                doi="10.7/c",
                title="preprint missing metadata",
                source_class=SourceClass.preprint,
                citation_count=None,
                download_rank_percentile=None,
            ),
            make_record("denied", doi="10.7/d", title="denied license", license="proprietary"),
            make_record(
                "dupe",
                doi="10.7/a",
                title="doi duplicate of keep1",
                source_class=SourceClass.preprint,
                citation_count=4,
                download_rank_percentile=0.02,
            ),
        ]
        result = ingest_records(records, taxonomy, resolver=None, license_denylist=["proprietary"])
        assert [r.doc_id for r in result.kept] == ["keep1"]
        reasons = dict(result.dropped)
        assert reasons["gated"] == "failed preprint gate"
        assert reasons["nometa"] == "insufficient metadata"
        assert reasons["denied"] == "license denied"
        assert reasons["dupe"] == "duplicate of keep1"

    def test_unusable_title_flagged_not_dropped(self):
        taxonomy = load_taxonomy(None)
        result = ingest_records([make_record("weird", title="?!")], taxonomy)
        assert [r.doc_id for r in result.kept] == ["weird"]
        assert "unusable title" in result.kept[0].flags
