"""Request and response models for the pipeline service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field

from ..evaluation import CaptionQAReport, CorpusStats, DistributionSummary
from ..models import CaptionVariant
from ..pipeline import RunReport
from ..reports import JudgeReport, RelevanceReport


class HealthResponse(BaseModel):
    status: str
    version: str


class StageRunRequest(BaseModel):
    config_path: str
    seed: Optional[int] = None
    workers: Optional[int] = None
    output_dir: Optional[str] = None


class RunResponse(BaseModel):
    report: RunReport


class ValidateRequest(BaseModel):
    shard_path: str


class ValidateResponse(BaseModel):
    ok: bool
    violations: list[str] = Field(default_factory=list)


class QwkRequest(BaseModel):
    ratings_a: list[int]
    ratings_b: list[int]


class QwkResponse(BaseModel):
    kappa: float
    pairs: int


class DistributionRequest(BaseModel):
    scores: list[float]
    bin_edges: Optional[list[float]] = None


class DistributionResponse(BaseModel):
    summary: DistributionSummary


class RelevanceRequest(BaseModel):
    config_path: str
    shard_path: str
    endpoint_id: str
    variant: CaptionVariant = CaptionVariant.recaption
    bin_edges: Optional[list[float]] = None


class RelevanceResponse(BaseModel):
    report: RelevanceReport


class JudgeRequest(BaseModel):
    config_path: str
    candidate: str
    original_caption: str
    judge_ids: list[str]
    image_ref: Optional[str] = None


class JudgeResponse(BaseModel):
    report: JudgeReport


class CaptionQARequest(BaseModel):
    benchmark_path: str
    captions_path: str
    output_path: Optional[str] = None
    # optional answering pass over the transformed items
    config_path: Optional[str] = None
    answer_endpoint_id: Optional[str] = None


class CaptionQAResponse(BaseModel):
    items: int
    skipped: list[str] = Field(default_factory=list)
    flagged: list[str] = Field(default_factory=list)
    output_path: Optional[str] = None
    answers: Optional[CaptionQAReport] = None
    accuracy: Optional[float] = None


class StatsRequest(BaseModel):
    shard_path: str
    output_dir: Optional[str] = None


class StatsResponse(BaseModel):
    stats: CorpusStats
    report_paths: dict[str, str] = Field(default_factory=dict)


class ErrorDetail(BaseModel):
    error: str
    stage: Optional[str] = None
