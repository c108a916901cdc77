"""Three-stage QA for candidate recaptions: length, repetition, fact check.

Gates run cheapest first and short-circuit; a candidate failing the length
gate never costs a fact-checker call. Failure reasons feed the regeneration
loop verbatim so the next prompt carries the full failure history.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

from .config import RepetitionConfig
from .models import Attempt, HallucinationType, QAStage, QAVerdict, Triplet
from .textutil import split_sentences, strip_code_fence, word_count

log = logging.getLogger(__name__)


def length_gate(candidate: str, max_words: int = 830) -> QAVerdict:
    """Fail only when the candidate exceeds the cap; the cap itself passes."""
    count = word_count(candidate)
    if count > max_words:
        return QAVerdict(
            stage=QAStage.length,
            passed=False,
            reason=f"length: {count} words exceeds the {max_words}-word cap",
        )
    return QAVerdict(stage=QAStage.length, passed=True)


def _max_window_repeats(tokens: list[str], window: int) -> int:
    if len(tokens) < window:
        return 0
    counts: Counter[tuple[str, ...]] = Counter()
    for i in range(len(tokens) - window + 1):
        counts[tuple(tokens[i : i + window])] += 1
    return max(counts.values())


def _max_sentence_repeats(text: str) -> int:
    sentences = split_sentences(text)
    if not sentences:
        return 0
    return max(Counter(sentences).values())


# Returns True when the text is degenerately repetitive; raises on failure.
RepetitionChecker = Callable[[str], bool]


def repetition_gate(
    candidate: str,
    cfg: Optional[RepetitionConfig] = None,
    llm_check: Optional[RepetitionChecker] = None,
) -> QAVerdict:
    """Rule-based redundancy screen with an optional LLM second opinion.

    The LLM stage can only tighten the verdict (pass -> fail), never loosen
    it, and any LLM failure leaves the rule verdict standing.
    """
    cfg = cfg or RepetitionConfig()
    tokens = candidate.split()
    window_repeats = _max_window_repeats(tokens, cfg.window_tokens)
    if window_repeats > cfg.max_window_repeats:
        return QAVerdict(
            stage=QAStage.repetition,
            passed=False,
            reason=f"repetition: an {cfg.window_tokens}-token window repeats {window_repeats} times",
        )
    sentence_repeats = _max_sentence_repeats(candidate)
    if sentence_repeats >= cfg.max_sentence_repeats:
        return QAVerdict(
            stage=QAStage.repetition,
            passed=False,
            reason=f"repetition: a sentence repeats {sentence_repeats} times",
        )
    if llm_check is not None:
        try:
            if llm_check(candidate):
                return QAVerdict(
                    stage=QAStage.repetition,
                    passed=False,
                    reason="repetition: flagged by self-consistency check",
                )
        except Exception as exc:
            log.warning("repetition self-consistency check unavailable: %s", exc)
    return QAVerdict(stage=QAStage.repetition, passed=True)


class FactCheckParseError(ValueError):
    pass


_VALID_TYPES = {t.value for t in HallucinationType}


def parse_fact_check_reply(text: str) -> QAVerdict:
    """Parse the checker's strict JSON verdict; a fenced JSON block is tolerated."""
    try:
        body = json.loads(strip_code_fence(text))
    except json.JSONDecodeError as exc:
        raise FactCheckParseError(f"not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise FactCheckParseError("reply is not a JSON object")
    if not isinstance(body.get("has_hallucination"), bool):
        raise FactCheckParseError("has_hallucination must be a boolean")
    has_hallucination = body["has_hallucination"]
    reason = str(body.get("reason", ""))
    if not has_hallucination:
        # A stray severity on a pass would violate the verdict invariant; drop it.
        return QAVerdict(stage=QAStage.fact_check, passed=True, reason=reason)
    raw_type = body.get("hallucination_type")
    if raw_type not in _VALID_TYPES or raw_type == HallucinationType.none.value:
        raise FactCheckParseError(f"bad hallucination_type: {raw_type!r}")
    severity = body.get("severity_score")
    if not isinstance(severity, int) or not 1 <= severity <= 5:
        raise FactCheckParseError(f"bad severity_score: {severity!r}")
    return QAVerdict(
        stage=QAStage.fact_check,
        passed=False,
        hallucination_type=HallucinationType(raw_type),
        severity_score=severity,
        reason=f"{raw_type}: {reason}" if reason else raw_type,
    )


class CheckerTransport(Protocol):
    """One fact-checker call: candidate in, raw reply text out, or None when
    the checker chain is exhausted."""

    def __call__(self, candidate: str, triplet: Triplet, reask: bool) -> Optional[str]: ...


def fact_check(candidate: str, triplet: Triplet, checker: CheckerTransport) -> QAVerdict:
    """Triangular verification of the candidate against image, caption, context.

    Malformed JSON earns exactly one re-ask; a second failure is a fail
    verdict, and an unreachable checker quarantines the candidate rather
    than letting it through unchecked.
    """
    for reask in (False, True):
        reply = checker(candidate, triplet, reask)
        if reply is None:
            return QAVerdict(
                stage=QAStage.fact_check, passed=False, reason="fact_check: checker unavailable"
            )
        try:
            return parse_fact_check_reply(reply)
        except FactCheckParseError as exc:
            log.info("fact-check reply unparseable (reask=%s): %s", reask, exc)
    return QAVerdict(stage=QAStage.fact_check, passed=False, reason="fact_check: unparseable reply")


@dataclass
class GenerationAttempt:
    text: Optional[str]
    attempts: list[Attempt]


# feedback holds the verbatim reasons of every prior failure, oldest first.
Generator = Callable[[Triplet, Sequence[str], int], GenerationAttempt]


@dataclass
class LoopResult:
    accepted: bool
    recaption: Optional[str]
    history: list[QAVerdict]
    attempts: list[Attempt]
    attempts_used: int
    rejection_reason: Optional[str] = None


def regeneration_loop(
    triplet: Triplet,
    generate: Generator,
    checker: Optional[CheckerTransport],
    max_attempts: int = 3,
    max_words: int = 830,
    repetition_cfg: Optional[RepetitionConfig] = None,
) -> LoopResult:
    """Generate, gate, and regenerate with failure feedback until accepted.

    Gate order is fixed (length, repetition, fact check) and the loop is
    bounded by max_attempts. Rejected triplets keep their raw caption; the
    verdict history and every dispatch attempt are preserved for the shard.
    """
    history: list[QAVerdict] = []
    transport_attempts: list[Attempt] = []
    feedback: list[str] = []
    for attempt_index in range(1, max_attempts + 1):
        generation = generate(triplet, tuple(feedback), attempt_index)
        transport_attempts.extend(generation.attempts)
        if generation.text is None:
            return LoopResult(
                accepted=False,
                recaption=None,
                history=history,
                attempts=transport_attempts,
                attempts_used=attempt_index,
                rejection_reason="recaption unavailable",
            )
        candidate = generation.text
        verdict = length_gate(candidate, max_words)
        if verdict.passed:
            verdict = repetition_gate(candidate, repetition_cfg)
        if verdict.passed and checker is not None:
            verdict = fact_check(candidate, triplet, checker)
        history.append(verdict)
        if verdict.passed:
            return LoopResult(
                accepted=True,
                recaption=candidate,
                history=history,
                attempts=transport_attempts,
                attempts_used=attempt_index,
            )
        feedback.append(verdict.reason)
    return LoopResult(
        accepted=False,
        recaption=None,
        history=history,
        attempts=transport_attempts,
        attempts_used=max_attempts,
        rejection_reason="quality gates not satisfied",
    )
