"""Caption quality evaluation: relevance scoring, judge ensemble, QWK,
caption-QA transform, and corpus statistics."""

from __future__ import annotations

import json
import logging
import math
import re
import statistics
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from .config import ScoreMap
from .models import CaptionQAItem, CaptionVariant, JudgeDimension, RelevanceScore, Triplet
from .textutil import strip_code_fence, word_count

log = logging.getLogger(__name__)

PLACEHOLDER_TOKEN = "<image>"
CAPTION_BLOCK_OPEN = "[FIGURE DESCRIPTION]"
CAPTION_BLOCK_CLOSE = "[/FIGURE DESCRIPTION]"


@dataclass
class ScoreRequest:
    triplet_id: str
    caption_variant: CaptionVariant
    image_ref: str
    caption: str


# Returns the endpoint's native score or None after retries are exhausted.
ScorerTransport = Callable[[ScoreRequest], Optional[float]]


def score_relevance(
    pairs: Sequence[ScoreRequest],
    scorer: ScorerTransport,
    score_map: Optional[ScoreMap] = None,
) -> tuple[list[RelevanceScore], list[str]]:
    """Score each image-caption pair; failures are recorded, never fabricated.

    Returns (scores, missing triplet ids). The per-endpoint score map
    normalizes native scales onto [0, 1].
    """
    mapper = score_map or ScoreMap()
    scores: list[RelevanceScore] = []
    missing: list[str] = []
    for request in pairs:
        raw = scorer(request)
        if raw is None:
            missing.append(request.triplet_id)
            continue
        scores.append(
            RelevanceScore(
                triplet_id=request.triplet_id,
                caption_variant=request.caption_variant,
                score=mapper.apply(raw),
            )
        )
    return scores, missing


DEFAULT_BIN_EDGES = (0.0, 0.5, 0.8, 0.9, 0.95, 0.99, 1.0)


class Histogram(BaseModel):
    bin_edges: list[float]
    counts: list[int]


class DistributionSummary(BaseModel):
    count: int
    mean: float
    median: float
    histogram: Histogram


def summarize_distribution(
    scores: Sequence[float], bin_edges: Optional[Sequence[float]] = None
) -> DistributionSummary:
    """Exact mean/median plus a histogram over configurable (non-linear) bins.

    The final bin is right-inclusive so counts always sum to len(scores)
    when the edges span the data.
    """
    if not scores:
        raise ValueError("summarize_distribution needs at least one score")
    edges = list(bin_edges if bin_edges is not None else DEFAULT_BIN_EDGES)
    if sorted(edges) != edges or len(edges) < 2:
        raise ValueError("bin edges must be sorted and define at least one bin")
    counts, _ = np.histogram(np.asarray(scores, dtype=np.float64), bins=np.asarray(edges))
    return DistributionSummary(
        count=len(scores),
        mean=math.fsum(scores) / len(scores),
        median=float(statistics.median(scores)),
        histogram=Histogram(bin_edges=edges, counts=[int(c) for c in counts]),
    )


class JudgeParseError(ValueError):
    pass


def parse_judge_reply(text: str, dimension: JudgeDimension) -> tuple[int, str]:
    """Extract (score, reasoning) from a judge's strict JSON verdict."""
    try:
        body = json.loads(strip_code_fence(text))
    except json.JSONDecodeError as exc:
        raise JudgeParseError(f"not valid JSON: {exc}") from exc
    if not isinstance(body, dict) or dimension.value not in body:
        raise JudgeParseError(f"missing {dimension.value!r} key")
    verdict = body[dimension.value]
    if not isinstance(verdict, dict):
        raise JudgeParseError("dimension verdict must be an object")
    score = verdict.get("score")
    if not isinstance(score, int) or not 1 <= score <= 5:
        raise JudgeParseError(f"bad score: {score!r}")
    return score, str(verdict.get("reasoning", ""))


# One judge call: (judge_id, dimension, rendered prompt, wants_image) -> raw
# reply text, or None when the judge is unreachable after retries.
JudgeTransport = Callable[[str, JudgeDimension, str, bool], Optional[str]]

_IMAGE_DIMENSIONS = {
    JudgeDimension.information_consistency,
    JudgeDimension.key_information_accuracy,
}


class DimensionResult(BaseModel):
    mean: float
    scores: dict[str, int]
    missing: list[str] = Field(default_factory=list)


def judge_caption(
    candidate: str,
    original_caption: str,
    judge_ids: Sequence[str],
    templates: Mapping[str, str],
    transport: JudgeTransport,
) -> dict[str, DimensionResult]:
    """Four-dimension ensemble judging with per-dimension arithmetic means.

    Fluency is text-only; consistency and key-accuracy see the image;
    detail compares against the original caption. A judge that fails or
    returns unparseable JSON (after one re-ask) is excluded from that
    dimension's mean and flagged; a dimension with no usable judges is
    absent from the result.
    """
    results: dict[str, DimensionResult] = {}
    for dimension in JudgeDimension:
        template = templates[dimension.value]
        prompt = template.replace("{model_prediction}", candidate)
        prompt = prompt.replace("{original_caption}", original_caption)
        wants_image = dimension in _IMAGE_DIMENSIONS
        scores: dict[str, int] = {}
        missing: list[str] = []
        for judge_id in judge_ids:
            parsed: Optional[tuple[int, str]] = None
            for _reask in range(2):
                reply = transport(judge_id, dimension, prompt, wants_image)
                if reply is None:
                    break
                try:
                    parsed = parse_judge_reply(reply, dimension)
                    break
                except JudgeParseError as exc:
                    log.info("judge %s %s unparseable: %s", judge_id, dimension.value, exc)
            if parsed is None:
                missing.append(judge_id)
            else:
                scores[judge_id] = parsed[0]
        if scores:
            mean = math.fsum(scores.values()) / len(scores)
            results[dimension.value] = DimensionResult(mean=mean, scores=scores, missing=missing)
    return results


def quadratic_weighted_kappa(ratings_a: Sequence[int], ratings_b: Sequence[int]) -> float:
    """Chance-corrected ordinal agreement over categories 1..5.

    Weights are (i-j)^2/(K-1)^2, the observed matrix comes from paired
    counts, and the expected matrix from the outer product of marginals.
    Two constant, identical raters have zero expected disagreement and by
    convention score 1.0.
    """
    if len(ratings_a) != len(ratings_b):
        raise ValueError("rating lists must have equal length")
    n = len(ratings_a)
    if n < 2:
        raise ValueError("need at least two paired ratings")
    k = 5
    for value in list(ratings_a) + list(ratings_b):
        if not 1 <= value <= k:
            raise ValueError(f"rating {value} outside 1..{k}")

    observed = np.zeros((k, k), dtype=np.float64)
    for a, b in zip(ratings_a, ratings_b):
        observed[a - 1, b - 1] += 1
    marg_a = observed.sum(axis=1)
    marg_b = observed.sum(axis=0)
    expected = np.outer(marg_a, marg_b) / n

    idx = np.arange(k, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2

    expected_disagreement = float((weights * expected).sum())
    if expected_disagreement == 0.0:
        return 1.0
    return 1.0 - float((weights * observed).sum()) / expected_disagreement


class BenchmarkItem(BaseModel):
    id: str
    question: str
    choices: Optional[list[str]] = None
    answer: str


class CaptionQATransformResult(BaseModel):
    items: list[CaptionQAItem]
    skipped: list[str] = Field(default_factory=list)  # ids without captions
    flagged: list[str] = Field(default_factory=list)  # ids without placeholders


def transform_caption_qa(
    items: Sequence[BenchmarkItem],
    captions: Mapping[str, Sequence[str] | str],
    placeholder: str = PLACEHOLDER_TOKEN,
) -> CaptionQATransformResult:
    """Replace each visual placeholder with its caption in a delimiter block.

    Captions are matched positionally when an item has several placeholders.
    Items with no caption are skipped; items with no placeholder pass
    through unchanged but flagged.
    """
    out: list[CaptionQAItem] = []
    skipped: list[str] = []
    flagged: list[str] = []
    for item in items:
        occurrences = item.question.count(placeholder)
        if occurrences == 0:
            flagged.append(item.id)
            out.append(
                CaptionQAItem(
                    benchmark_id=item.id,
                    question_text=item.question,
                    choices=item.choices,
                    gold_answer=item.answer,
                    caption_used="",
                )
            )
            continue
        supplied = captions.get(item.id)
        if supplied is None:
            skipped.append(item.id)
            continue
        caption_list = [supplied] if isinstance(supplied, str) else list(supplied)
        if len(caption_list) < occurrences:
            skipped.append(item.id)
            continue
        question = item.question
        for caption in caption_list[:occurrences]:
            block = f"{CAPTION_BLOCK_OPEN} {caption} {CAPTION_BLOCK_CLOSE}"
            question = question.replace(placeholder, block, 1)
        out.append(
            CaptionQAItem(
                benchmark_id=item.id,
                question_text=question,
                choices=item.choices,
                gold_answer=item.answer,
                caption_used=" | ".join(caption_list[:occurrences]),
            )
        )
    return CaptionQATransformResult(items=out, skipped=skipped, flagged=flagged)


_CHOICE_LETTER = re.compile(r"^\(?([A-Za-z])\)?[.:)]?\s*$")


def normalize_answer(answer: str) -> str:
    """Exact-match normalization: case, surrounding punctuation, choice letters."""
    text = answer.strip()
    m = _CHOICE_LETTER.match(text)
    if m:
        return m.group(1).lower()
    return re.sub(r"\s+", " ", text.lower().strip(" .:;,\"'"))


# Answering transport: rendered question in, model answer text out or None.
AnswerTransport = Callable[[CaptionQAItem], Optional[str]]


class CaptionQAReport(BaseModel):
    total: int
    answered: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.answered if self.answered else 0.0


def answer_caption_qa(items: Sequence[CaptionQAItem], transport: AnswerTransport) -> CaptionQAReport:
    """Run a text-only reasoner over transformed items and score exact-match."""
    answered = 0
    correct = 0
    for item in items:
        reply = transport(item)
        if reply is None:
            continue
        answered += 1
        if normalize_answer(reply) == normalize_answer(item.gold_answer):
            correct += 1
    return CaptionQAReport(total=len(items), answered=answered, correct=correct)


class LengthStats(BaseModel):
    count: int
    mean_words: float
    median_words: float
    histogram: dict[int, int]  # word count -> occurrences


class CorpusStats(BaseModel):
    triplets: int
    raw_caption: LengthStats
    recaption: Optional[LengthStats] = None
    mean_context_paragraphs: float


def _length_stats(lengths: Sequence[int]) -> LengthStats:
    histogram: dict[int, int] = {}
    for n in lengths:
        histogram[n] = histogram.get(n, 0) + 1
    return LengthStats(
        count=len(lengths),
        mean_words=math.fsum(lengths) / len(lengths),
        median_words=float(statistics.median(lengths)),
        histogram=dict(sorted(histogram.items())),
    )


def corpus_stats(triplets: Sequence[Triplet]) -> CorpusStats:
    """Caption length distributions and context density, shared tokenizer throughout."""
    if not triplets:
        raise ValueError("corpus_stats needs at least one triplet")
    raw_lengths = [word_count(t.raw_caption) for t in triplets]
    recap_lengths = [word_count(t.recaption) for t in triplets if t.recaption is not None]
    return CorpusStats(
        triplets=len(triplets),
        raw_caption=_length_stats(raw_lengths),
        recaption=_length_stats(recap_lengths) if recap_lengths else None,
        mean_context_paragraphs=math.fsum(len(t.contexts) for t in triplets) / len(triplets),
    )
