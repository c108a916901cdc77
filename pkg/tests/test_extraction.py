from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from scifig.extraction import (
    bind_figure_captions,
    extract_contexts,
    map_subfigures,
    parse_figure_identifiers,
    sanitize_caption,
)
from scifig.models import ElementKind, OcrToken

from conftest import make_doc, make_element, make_figure

F, C, P, O = ElementKind.figure, ElementKind.caption, ElementKind.paragraph, ElementKind.other


class TestParseIdentifiers:
    def test_panel_identifier(self):
        assert parse_figure_identifiers("Fig. 2a | Lantern design.") == ["Fig. 2a"]

    def test_no_identifier(self):
        assert parse_figure_identifiers("Overview of results.") == []

    def test_bare_then_panel(self):
        # hand-enumerated oracle for the example caption: bare "Figure 3"
        # and the panel form "Figure 3b" are distinct identifiers
        caption = "Figure 3. (a) device sketch; see also Figure 3b inset"
        assert parse_figure_identifiers(caption) == ["Figure 3", "Figure 3b"]

    def test_case_insensitive_and_schema(self):
        assert parse_figure_identifiers("SCHEMA 1A shows the route") == ["SCHEMA 1A"]
        assert parse_figure_identifiers("scheme 2 outlines synthesis") == ["scheme 2"]

    def test_dedup_by_canonical_key(self):
        caption = "Figure 4 shows X. As Fig. 4 makes clear, Y."
        assert parse_figure_identifiers(caption) == ["Figure 4"]

    def test_parenthesized_panel(self):
        assert parse_figure_identifiers("Fig. 5(b) displays the trend") == ["Fig. 5(b)"]

    def test_spaced_letter_is_not_a_panel(self):
        assert parse_figure_identifiers("Figure 2 a sample image") == ["Figure 2"]

    def test_hand_enumerated_corpus(self):
        # oracle list built by hand for a small mixed corpus
        cases = {
            "Fig. 10c and Figure 2 compared.": ["Fig. 10c", "Figure 2"],
            "Scheme 1A. Synthetic route.": ["Scheme 1A"],
            "No figures here, just words.": [],
            "figure 7 (a) region and figure 7b region": ["figure 7", "figure 7b"],
        }
        for caption, expected in cases.items():
            assert parse_figure_identifiers(caption) == expected, caption


class TestExtractContexts:
    def _doc(self):
        return make_doc(
            "doc1",
            [
                make_element(P, 0, text="Intro paragraph without mentions."),
                make_element(F, 1, image_ref="img.png"),
                make_element(C, 2, text="Fig. 2a | Coupling map."),
                make_element(P, 3, text="as shown in Fig. 2a, the coupling strengthens"),
                make_element(P, 4, text="Figure 2 gives the full overview of the device."),
                make_element(P, 5, text="unrelated paragraph about Fig. 3 instead"),
            ],
        )

    def test_whole_paragraph_returned_byte_exact(self):
        contexts = extract_contexts(self._doc(), ["Fig. 2a"])
        assert "as shown in Fig. 2a, the coupling strengthens" in contexts

    def test_bare_mention_matches_panel_identifier(self):
        contexts = extract_contexts(self._doc(), ["Fig. 2a"])
        assert "Figure 2 gives the full overview of the device." in contexts
        assert len(contexts) == 2

    def test_panel_mention_does_not_match_bare_identifier(self):
        doc = make_doc(
            "doc2",
            [
                make_element(P, 0, text="Panel talk about Figure 2b only."),
                make_element(P, 1, text="Whole Figure 2 is discussed here."),
            ],
        )
        contexts = extract_contexts(doc, ["Figure 2"])
        assert contexts == ["Whole Figure 2 is discussed here."]

    def test_caption_never_returned(self):
        contexts = extract_contexts(self._doc(), ["Fig. 2a"])
        assert all("Coupling map" not in c for c in contexts)

    def test_identifier_only_in_caption_gives_empty(self):
        doc = make_doc(
            "doc3",
            [
                make_element(C, 0, text="Figure 9. Lonely caption."),
                make_element(P, 1, text="Body text that never cites it."),
            ],
        )
        assert extract_contexts(doc, ["Figure 9"]) == []

    def test_three_planted_mentions_in_reading_order(self):
        paragraphs = [
            "First mention of Figure 6 in the methods.",
            "A second look at Fig. 6 under load.",
            "Final remarks referencing Figure 6 again.",
        ]
        doc = make_doc(
            "doc4",
            [
                make_element(P, 0, text=paragraphs[0]),
                make_element(P, 1, text="Distractor paragraph."),
                make_element(P, 2, text=paragraphs[1]),
                make_element(P, 3, text=paragraphs[2]),
            ],
        )
        assert extract_contexts(doc, ["Figure 6"]) == paragraphs

    def test_duplicate_paragraph_text_deduplicated(self):
        doc = make_doc(
            "doc5",
            [
                make_element(P, 0, text="Repeated line citing Figure 1."),
                make_element(P, 1, text="Repeated line citing Figure 1."),
            ],
        )
        assert extract_contexts(doc, ["Figure 1"]) == ["Repeated line citing Figure 1."]


class TestBindFigureCaptions:
    def test_caption_following_figure_binds(self):
        doc = make_doc(
            "b1", [make_element(F, 0), make_element(C, 1, text="Figure 1. Caption.")]
        )
        result = bind_figure_captions(doc)
        assert len(result.bound) == 1 and not result.excluded

    def test_cross_page_adjacency_binds(self):
        doc = make_doc(
            "b2",
            [
                make_element(P, 10, page=1, text="body"),
                make_element(F, 11, page=1),
                make_element(C, 12, page=2, text="Figure 1. Caption on the next page."),
            ],
        )
        result = bind_figure_captions(doc)
        assert len(result.bound) == 1
        assert result.bound[0].caption.page == 2

    def test_preceding_caption_binds_when_nothing_follows(self):
        doc = make_doc(
            "b3", [make_element(C, 0, text="Figure 1. Above."), make_element(F, 1)]
        )
        result = bind_figure_captions(doc)
        assert len(result.bound) == 1

    def test_zero_candidates_excluded(self):
        doc = make_doc(
            "b4",
            [
                make_element(F, 0),
                make_element(P, 1, text="a"),
                make_element(P, 2, text="b"),
                make_element(P, 3, text="c"),
                make_element(C, 4, text="Figure 1. Too far away."),
            ],
        )
        result = bind_figure_captions(doc, window=2)
        assert not result.bound
        assert result.excluded[0].reason == "no caption candidate"

    def test_contended_caption_excludes_both_figures(self):
        doc = make_doc(
            "b5",
            [make_element(F, 0), make_element(C, 1, text="Figure 1. Contended."), make_element(F, 2)],
        )
        result = bind_figure_captions(doc)
        assert not result.bound
        assert [ex.reason for ex in result.excluded] == ["ambiguous binding", "ambiguous binding"]

    def test_low_confidence_excluded(self):
        doc = make_doc(
            "b6",
            [
                make_element(F, 0, confidence=0.2),
                make_element(C, 1, text="Figure 1. Fine caption."),
            ],
        )
        result = bind_figure_captions(doc, confidence_threshold=0.5)
        assert not result.bound
        assert result.excluded[0].reason == "low confidence"

    def test_interleaved_pairs_bind_to_following_captions(self):
        doc = make_doc(
            "b7",
            [
                make_element(F, 0),
                make_element(C, 1, text="Figure 1. First."),
                make_element(F, 2),
                make_element(C, 3, text="Figure 2. Second."),
            ],
        )
        result = bind_figure_captions(doc)
        assert len(result.bound) == 2
        assert [p.caption.reading_order_index for p in result.bound] == [1, 3]

    def test_binding_deterministic_under_element_permutation(self):
        elements = [
            make_element(F, 0),
            make_element(C, 1, text="Figure 1. First."),
            make_element(P, 2, text="body"),
            make_element(F, 3),
            make_element(C, 4, text="Figure 2. Second."),
        ]
        forward = bind_figure_captions(make_doc("b8", elements))
        shuffled = bind_figure_captions(make_doc("b8", list(reversed(elements))))
        as_pairs = lambda r: [
            (p.figure.reading_order_index, p.caption.reading_order_index) for p in r.bound
        ]
        assert as_pairs(forward) == as_pairs(shuffled)

    def test_synthetic_500_element_document(self):
        # 30 planted figures: 28 clean pairs, 2 contending for one caption.
        # Ground truth is enumerated by construction.
        elements = []
        index = 0
        expected_pairs = []

        def filler(n):
            nonlocal index
            for _ in range(n):
                elements.append(make_element(P, index, text=f"filler paragraph {index}"))
                index += 1

        filler(5)
        for fig_no in range(1, 29):
            elements.append(make_element(F, index, image_ref=f"f{fig_no}.png"))
            fig_index = index
            index += 1
            elements.append(make_element(C, index, text=f"Figure {fig_no}. Planted caption."))
            expected_pairs.append((fig_index, index))
            index += 1
            filler(14)
        # ambiguous block: figure, caption, figure
        ambiguous = []
        elements.append(make_element(F, index, image_ref="amb1.png")); ambiguous.append(index); index += 1
        elements.append(make_element(C, index, text="Figure 99. Contended.")); index += 1
        elements.append(make_element(F, index, image_ref="amb2.png")); ambiguous.append(index); index += 1
        filler(500 - len(elements))

        doc = make_doc("big", elements)
        assert sum(1 for _ in doc.iter_elements()) == 500
        result = bind_figure_captions(doc)
        got_pairs = [(p.figure.reading_order_index, p.caption.reading_order_index) for p in result.bound]
        assert got_pairs == expected_pairs
        assert len(result.bound) == 28
        assert sorted(ex.figure.reading_order_index for ex in result.excluded) == ambiguous
        assert {ex.reason for ex in result.excluded} == {"ambiguous binding"}


class TestMapSubfigures:
    def test_tokens_matched_to_fragments(self, figure_classes):
        figure = make_figure("m1", width=400, height=300)
        tokens = [
            OcrToken(text="a", bbox=(10.0, 10.0, 20.0, 20.0)),
            OcrToken(text="(b)", bbox=(210.0, 10.0, 220.0, 20.0)),
        ]
        out = map_subfigures(figure, tokens, "(a) reaction schematic; (b) Raman spectra.", figure_classes)
        assert [sf.label for sf in out.subfigures] == ["a", "b"]
        assert out.subfigures[0].sub_caption == "reaction schematic"
        assert out.subfigures[0].semantic_type == "chemical_reaction"
        assert out.subfigures[1].sub_caption == "Raman spectra."
        assert out.subfigures[1].semantic_type == "spectrum"

    def test_no_tokens_no_panels(self, figure_classes):
        out = map_subfigures(make_figure("m2"), [], "(a) one; (b) two.", figure_classes)
        assert out.subfigures == []

    def test_fragment_without_token_not_emitted(self, figure_classes):
        tokens = [OcrToken(text="a", bbox=(5.0, 5.0, 12.0, 12.0))]
        out = map_subfigures(make_figure("m3"), tokens, "(a) first; (c) phantom.", figure_classes)
        assert [sf.label for sf in out.subfigures] == ["a"]

    def test_duplicate_letter_keeps_first_in_raster_order(self, figure_classes):
        tokens = [
            OcrToken(text="a", bbox=(300.0, 200.0, 310.0, 210.0)),
            OcrToken(text="a", bbox=(10.0, 10.0, 20.0, 20.0)),
        ]
        out = map_subfigures(make_figure("m4"), tokens, "(a) kept fragment.", figure_classes)
        assert len(out.subfigures) == 1
        assert out.subfigures[0].panel_bbox == (10.0, 10.0, 20.0, 20.0)

    def test_unmatched_token_keeps_empty_subcaption(self, figure_classes):
        tokens = [OcrToken(text="d", bbox=(30.0, 30.0, 40.0, 40.0))]
        out = map_subfigures(make_figure("m5"), tokens, "No panel markers in this caption.", figure_classes)
        assert out.subfigures[0].label == "d"
        assert out.subfigures[0].sub_caption == ""
        assert out.subfigures[0].semantic_type == "unknown"


class TestSanitizeCaption:
    def test_doi_and_copyright_removed(self):
        assert sanitize_caption("Spectra. https://doi.org/10.1/x © 2024 Authors.") == "Spectra."

    def test_scientific_symbols_preserved(self):
        text = "TiO₂ at λ = 550 nm."
        assert sanitize_caption(text) == text

    def test_control_character_removed(self):
        assert sanitize_caption("Growthcurve.") == "Growthcurve."

    def test_bare_doi_removed(self):
        assert sanitize_caption("Results from 10.1234/abcd.5 here.") == "Results from here."

    def test_rights_reserved_removed(self):
        out = sanitize_caption("Micrograph of sample. All rights reserved.")
        assert out == "Micrograph of sample."

    def test_newlines_collapse_to_spaces(self):
        assert sanitize_caption("line one\nline two") == "line one line two"

    @given(st.text(max_size=200))
    def test_idempotent(self, text):
        once = sanitize_caption(text)
        assert sanitize_caption(once) == once
