"""Domain records shared across pipeline stages.

Everything here is a pydantic model so the same types serve as the wire
schema for the service, the shard record layout, and in-process values.
Invariants that the shard validator re-checks are enforced at parse time.
"""

from __future__ import annotations

import datetime as dt
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

BBox = tuple[float, float, float, float]


class SourceClass(str, Enum):
    journal = "journal"
    preprint = "preprint"


class DocumentRecord(BaseModel):
    """One source article's metadata as consumed from NDJSON."""

    model_config = ConfigDict(extra="forbid")

    doc_id: str
    doi: Optional[str] = None
    title: str
    normalized_title: str = ""
    source_class: SourceClass
    venue: str = ""
    citation_count: Optional[int] = Field(default=None, ge=0)
    download_rank_percentile: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    disciplines: list[str] = Field(default_factory=list)
    raw_subjects: list[str] = Field(default_factory=list)
    license: str = ""
    version_date: Optional[dt.date] = None
    flags: list[str] = Field(default_factory=list)


class ElementKind(str, Enum):
    figure = "figure"
    caption = "caption"
    paragraph = "paragraph"
    other = "other"


class LayoutElement(BaseModel):
    kind: ElementKind
    page: int
    bbox: BBox
    text: Optional[str] = None
    image_ref: Optional[str] = None
    reading_order_index: int
    confidence: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _kind_payload(self) -> "LayoutElement":
        if self.kind is ElementKind.figure and not self.image_ref:
            raise ValueError("figure element requires image_ref")
        if self.kind in (ElementKind.caption, ElementKind.paragraph) and self.text is None:
            raise ValueError(f"{self.kind.value} element requires text")
        return self


class OcrToken(BaseModel):
    text: str
    bbox: BBox


class LayoutPage(BaseModel):
    number: int
    elements: list[LayoutElement]


class LayoutDocument(BaseModel):
    """Parsed layout of one source PDF, in logical reading order."""

    doc_id: str
    pages: list[LayoutPage]
    # OCR tokens for rasterized panel identifiers, keyed by figure image_ref.
    ocr_tokens: dict[str, list[OcrToken]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _reading_order_is_total(self) -> "LayoutDocument":
        indexes = [el.reading_order_index for el in self.iter_elements()]
        if len(indexes) != len(set(indexes)):
            raise ValueError("reading_order_index must be a strict total order")
        return self

    def iter_elements(self):
        for page in self.pages:
            yield from page.elements

    def sorted_elements(self) -> list[LayoutElement]:
        return sorted(self.iter_elements(), key=lambda el: el.reading_order_index)


class SubFigure(BaseModel):
    panel_bbox: BBox
    label: str
    sub_caption: str = ""
    semantic_type: str = "unknown"


class FigureAsset(BaseModel):
    figure_id: str
    image_ref: str
    width_px: int = Field(gt=0)
    height_px: int = Field(gt=0)
    page: int
    bbox: BBox
    subfigures: list[SubFigure] = Field(default_factory=list)

    @model_validator(mode="after")
    def _panels_consistent(self) -> "FigureAsset":
        labels = [sf.label for sf in self.subfigures]
        if len(labels) != len(set(labels)):
            raise ValueError("sub-figure labels must be unique within a figure")
        x0, y0, x1, y1 = self.bbox
        for sf in self.subfigures:
            px0, py0, px1, py1 = sf.panel_bbox
            if not (x0 <= px0 and y0 <= py0 and px1 <= x1 and py1 <= y1):
                raise ValueError(f"panel bbox for '{sf.label}' outside figure bbox")
        return self


class AttemptOutcome(str, Enum):
    ok = "ok"
    http_error = "http_error"
    timeout = "timeout"
    refusal = "refusal"


class Attempt(BaseModel):
    endpoint: str
    outcome: AttemptOutcome
    latency_ms: int = 0


class FinalOutcome(str, Enum):
    ok = "ok"
    failed = "failed"


class RoutingDecision(BaseModel):
    triplet_id: str
    matched_rule_index: int
    chosen_endpoint: str
    attempts: list[Attempt]
    final_outcome: FinalOutcome

    @model_validator(mode="after")
    def _attempts_consistent(self) -> "RoutingDecision":
        if not self.attempts:
            raise ValueError("attempts must be non-empty")
        if self.final_outcome is FinalOutcome.ok and self.attempts[-1].outcome is not AttemptOutcome.ok:
            raise ValueError("final_outcome ok requires last attempt ok")
        return self


class QAStage(str, Enum):
    length = "length"
    repetition = "repetition"
    fact_check = "fact_check"


class HallucinationType(str, Enum):
    pattern_extension = "Pattern_Extension"
    data_fabrication = "Data_Fabrication"
    visual_misattribution = "Visual_Misattribution"
    none = "None"


class QAVerdict(BaseModel):
    stage: QAStage
    passed: bool
    hallucination_type: HallucinationType = HallucinationType.none
    severity_score: Optional[int] = Field(default=None, ge=1, le=5)
    reason: str = ""

    @model_validator(mode="after")
    def _consistent(self) -> "QAVerdict":
        if self.passed and self.hallucination_type is not HallucinationType.none:
            raise ValueError("a passing verdict cannot carry a hallucination type")
        if self.severity_score is not None and (self.passed or self.stage is not QAStage.fact_check):
            raise ValueError("severity_score only on failed fact_check verdicts")
        return self


class Provenance(BaseModel):
    """Attempt and QA trail carried by a triplet into the shard."""

    attempts: list[Attempt] = Field(default_factory=list)
    qa_history: list[QAVerdict] = Field(default_factory=list)
    flags: list[str] = Field(default_factory=list)


class Triplet(BaseModel):
    triplet_id: str
    doc_id: str
    figure: FigureAsset
    raw_caption: str
    figure_identifiers: list[str]
    contexts: list[str] = Field(default_factory=list)
    recaption: Optional[str] = None
    provenance: Provenance = Field(default_factory=Provenance)

    @field_validator("contexts")
    @classmethod
    def _no_duplicate_contexts(cls, v: list[str]) -> list[str]:
        if len(v) != len(set(v)):
            raise ValueError("contexts must not contain duplicate paragraphs")
        return v


class FilterDecision(BaseModel):
    accepted: bool
    reason: Optional[str] = None


class ComplexitySignals(BaseModel):
    subfigure_count: int = 0
    context_length_chars: int = 0
    caption_keywords_matched: list[str] = Field(default_factory=list)


class FigureCategory(BaseModel):
    subject_area: str = ""
    visual_type: str = "mixed"
    complexity_signals: ComplexitySignals = Field(default_factory=ComplexitySignals)


class CaptionVariant(str, Enum):
    raw = "raw"
    recaption = "recaption"
    model_generated = "model_generated"


class RelevanceScore(BaseModel):
    triplet_id: str
    caption_variant: CaptionVariant
    score: float = Field(ge=0.0, le=1.0)


class JudgeDimension(str, Enum):
    language_fluency = "language_fluency"
    information_consistency = "information_consistency"
    key_information_accuracy = "key_information_accuracy"
    detail_level = "detail_level"


class JudgeScore(BaseModel):
    triplet_id: str
    judge_id: str
    dimension: JudgeDimension
    score: int = Field(ge=1, le=5)
    reasoning: str = ""


class CaptionQAItem(BaseModel):
    benchmark_id: str
    question_text: str
    choices: Optional[list[str]] = None
    gold_answer: str
    caption_used: str
