from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from scifig.config import FilterConfig
from scifig.filtering import (
    ImageDecodeError,
    PerceptualHash,
    caption_quality_filter,
    dedup_figures_within_article,
    figure_quality_filter,
    load_grayscale,
    phash,
    phash_similarity,
)
from scifig.textutil import word_count

from conftest import make_figure, make_triplet, structured_image


def oracle_similarity(a: int, b: int) -> float:
    """Bit-string popcount oracle, independent of int.bit_count."""
    xor = format(a ^ b, "064b")
    return 1.0 - xor.count("1") / 64.0


def flip_bits(bits: int, positions: list[int]) -> int:
    for p in positions:
        bits ^= 1 << p
    return bits


class TestPhash:
    def test_identical_pixels_identical_hash(self):
        img = structured_image(1)
        assert phash(img).bits == phash(img.copy()).bits

    def test_solid_image_stable_constant(self):
        flat = np.full((64, 64), 128.0)
        first = phash(flat)
        again = phash(np.full((64, 64), 128.0))
        assert first.bits == again.bits
        # with all AC coefficients ~0 only the DC term can exceed the median
        assert bin(first.bits).count("1") <= 1

    def test_jpeg_recompression_stays_above_threshold(self):
        img = structured_image(7)
        original = phash(img)
        buffer = io.BytesIO()
        Image.fromarray(img.astype(np.uint8), mode="L").save(buffer, format="JPEG", quality=80)
        buffer.seek(0)
        recompressed = np.asarray(Image.open(buffer).convert("L"), dtype=np.float64)
        sim = phash_similarity(original, phash(recompressed))
        assert sim == oracle_similarity(original.bits, phash(recompressed).bits)
        assert sim >= 0.965

    def test_too_small_input_rejected(self):
        with pytest.raises(ValueError):
            phash(np.zeros((4, 4)))

    def test_decode_failure(self, tmp_path):
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"this is not an image")
        with pytest.raises(ImageDecodeError):
            load_grayscale(bad)


class TestPhashSimilarity:
    def test_reflexive(self):
        h = phash(structured_image(2))
        assert phash_similarity(h, h) == 1.0

    def test_two_bit_distance_brackets_threshold(self):
        base = phash(structured_image(3))
        two = PerceptualHash(bits=flip_bits(base.bits, [5, 40]), algorithm_tag=base.algorithm_tag)
        expected = oracle_similarity(base.bits, two.bits)
        assert expected == 0.96875
        assert phash_similarity(base, two) == expected
        assert phash_similarity(base, two) >= 0.965

    def test_three_bit_distance_below_threshold(self):
        base = phash(structured_image(3))
        three = PerceptualHash(bits=flip_bits(base.bits, [5, 40, 63]), algorithm_tag=base.algorithm_tag)
        expected = oracle_similarity(base.bits, three.bits)
        assert expected == 0.953125
        assert phash_similarity(base, three) == expected
        assert phash_similarity(base, three) < 0.965

    def test_mismatched_algorithm_tag(self):
        a = PerceptualHash(bits=0, algorithm_tag="dct32-8x8-median-v1")
        b = PerceptualHash(bits=0, algorithm_tag="other")
        with pytest.raises(ValueError):
            phash_similarity(a, b)

    @given(a=st.integers(min_value=0, max_value=2**64 - 1), b=st.integers(min_value=0, max_value=2**64 - 1))
    def test_symmetric_and_matches_oracle(self, a, b):
        ha, hb = PerceptualHash(bits=a), PerceptualHash(bits=b)
        assert phash_similarity(ha, hb) == phash_similarity(hb, ha)
        assert phash_similarity(ha, hb) == oracle_similarity(a, b)
        assert (phash_similarity(ha, hb) == 1.0) == (a == b)


class TestDedupWithinArticle:
    def _hashes(self, figures, bits):
        return {
            fig.figure_id: PerceptualHash(bits=b) for fig, b in zip(figures, bits)
        }

    def test_identical_pair_drops_second(self):
        figs = [make_figure("a"), make_figure("b")]
        kept, dropped = dedup_figures_within_article(
            figs, self._hashes(figs, [123, 123]), FilterConfig()
        )
        assert [f.figure_id for f in kept] == ["a"]
        assert dropped == [("b", "near-duplicate of a")]

    def test_unrelated_pair_kept(self):
        figs = [make_figure("a"), make_figure("b")]
        kept, dropped = dedup_figures_within_article(
            figs, self._hashes(figs, [0, 2**64 - 1]), FilterConfig()
        )
        assert len(kept) == 2 and not dropped

    def test_planted_fixture_keeps_expected_set(self):
        # ten figures, three of which are near-duplicates (<=2 bits away)
        # of earlier ones; pairwise oracle fixes the expected survivors
        base = [phash(structured_image(s)).bits for s in range(7)]
        bits = [
            base[0],
            base[1],
            flip_bits(base[0], [3]),        # dup of fig00
            base[2],
            base[3],
            flip_bits(base[1], [10, 20]),   # dup of fig01
            base[4],
            flip_bits(base[3], [60]),       # dup of fig04
            base[5],
            base[6],
        ]
        figs = [make_figure(f"fig{i:02d}") for i in range(10)]
        hashes = self._hashes(figs, bits)
        cfg = FilterConfig()

        expected_kept = []
        for i, fig in enumerate(figs):
            if not any(
                oracle_similarity(bits[i], bits[j]) >= cfg.phash_similarity_threshold
                for j in range(i)
                if figs[j].figure_id in expected_kept
            ):
                expected_kept.append(fig.figure_id)
        assert len(expected_kept) == 7

        kept, dropped = dedup_figures_within_article(figs, hashes, cfg)
        assert [f.figure_id for f in kept] == expected_kept
        assert len(dropped) == 3


class TestFigureQualityFilter:
    @pytest.mark.parametrize(
        "width,height,accepted,reason",
        [
            (199, 300, False, "resolution"),
            (300, 199, False, "resolution"),
            (200, 200, True, None),
            (3000, 100, False, "resolution"),   # fails the 200px bound first
            (3000, 300, False, "aspect"),       # ratio 10 > 8
            (2400, 300, True, None),            # ratio exactly 8.0 passes
            (240, 2000, False, "aspect"),
            (800, 600, True, None),
        ],
    )
    def test_truth_table(self, width, height, accepted, reason):
        decision = figure_quality_filter(make_figure("f", width=width, height=height), FilterConfig())
        assert decision.accepted is accepted
        assert decision.reason == reason

    def test_default_aspect_bound_rejects_ratio_30(self):
        # 3000x100 would be ratio 30; with a permissive resolution floor the
        # aspect rule alone rejects it
        cfg = FilterConfig(min_width_px=50, min_height_px=50)
        decision = figure_quality_filter(make_figure("f", width=3000, height=100), cfg)
        assert decision.accepted is False and decision.reason == "aspect"


class TestCaptionQualityFilter:
    def test_short_without_context_rejected(self):
        triplet = make_triplet(caption="Reaction scheme.", contexts=[])
        decision = caption_quality_filter(triplet, FilterConfig())
        assert decision.accepted is False
        assert decision.reason == "too short, no context"

    def test_short_with_context_accepted(self):
        triplet = make_triplet(caption="Reaction scheme.", contexts=["One context paragraph."])
        assert caption_quality_filter(triplet, FilterConfig()).accepted is True

    def test_lowercase_start_rejected(self):
        triplet = make_triplet(caption="the measured spectra are shown and discussed over many more words right here.")
        decision = caption_quality_filter(triplet, FilterConfig())
        assert decision.reason == "capitalization"

    def test_digit_prefix_checks_first_alphabetic(self):
        triplet = make_triplet(caption="2D Materials grown by chemical vapor deposition over large-area polycrystalline copper foil substrates.")
        assert caption_quality_filter(triplet, FilterConfig()).accepted is True

    def test_missing_terminal_punctuation_rejected(self):
        triplet = make_triplet(caption="Spectra of all the prepared samples measured repeatedly at stable room temperature")
        assert caption_quality_filter(triplet, FilterConfig()).reason == "punctuation"

    @pytest.mark.parametrize("terminal", [".", ";", "!", "?"])
    def test_terminal_set(self, terminal):
        triplet = make_triplet(caption=f"Spectra of all the twelve prepared samples measured repeatedly at room temperature{terminal}")
        assert caption_quality_filter(triplet, FilterConfig()).accepted is True

    def test_eleven_words_without_context_accepted(self):
        caption = "One two three four five six seven eight nine ten eleven."
        assert word_count(caption) == 11
        triplet = make_triplet(caption=caption, contexts=[])
        assert caption_quality_filter(triplet, FilterConfig()).accepted is True

    def test_exactly_ten_words_without_context_rejected(self):
        caption = "One two three four five six seven eight nine ten."
        assert word_count(caption) == 10
        triplet = make_triplet(caption=caption, contexts=[])
        assert caption_quality_filter(triplet, FilterConfig()).accepted is False


class TestWordCount:
    def test_multiple_spaces(self):
        assert word_count("a b  c") == 3

    @given(st.text(alphabet=st.characters(whitelist_categories=["Ll", "Zs"]), max_size=80))
    def test_stable_under_space_collapsing(self, text):
        import re

        collapsed = re.sub(r"\s+", " ", text).strip()
        assert word_count(text) == word_count(collapsed)
