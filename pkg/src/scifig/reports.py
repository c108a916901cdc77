"""Evaluation entry points over finished shards.

These wrap the pure evaluation math with endpoint transports and shard IO
so the service and CLI can expose them as single calls.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, Field

from .evaluation import (
    BenchmarkItem,
    CaptionQAItem,
    CaptionQAReport,
    CaptionQATransformResult,
    CorpusStats,
    DimensionResult,
    DistributionSummary,
    ScoreRequest,
    answer_caption_qa,
    corpus_stats,
    judge_caption,
    score_relevance,
    summarize_distribution,
    transform_caption_qa,
)
from .models import CaptionVariant, JudgeDimension, Provenance, Triplet
from .pipeline import RunContext
from .protocol import build_payload, image_part_from_file
from .shard import ShardRecord, read_shard_records


class RelevanceReport(BaseModel):
    variant: CaptionVariant
    scored: int
    missing: list[str] = Field(default_factory=list)
    summary: Optional[DistributionSummary] = None


def _caption_for(record: ShardRecord, variant: CaptionVariant) -> Optional[str]:
    if variant is CaptionVariant.raw:
        return record.raw_caption
    return record.recaption


def evaluate_relevance(
    ctx: RunContext,
    shard_path: str | Path,
    endpoint_id: str,
    variant: CaptionVariant = CaptionVariant.recaption,
    bin_edges: Optional[Sequence[float]] = None,
) -> RelevanceReport:
    """Score image-caption pairs from a shard with a reranker endpoint."""
    endpoint = ctx.registry[endpoint_id]
    records = read_shard_records(shard_path)

    def scorer(request: ScoreRequest) -> Optional[float]:
        payload = build_payload(
            request.caption,
            [image_part_from_file(ctx.image_path(request.image_ref))],
            temperature=endpoint.temperature,
            top_p=endpoint.top_p,
        )
        reply = ctx.caller.call(endpoint, payload, call_key=f"{request.triplet_id}:score")
        return None if reply is None else reply.score

    pairs = []
    for record in records:
        caption = _caption_for(record, variant)
        if caption is None:
            continue
        pairs.append(
            ScoreRequest(
                triplet_id=record.triplet_id,
                caption_variant=variant,
                image_ref=record.image_path,
                caption=caption,
            )
        )
    scores, missing = score_relevance(pairs, scorer, endpoint.score_map)
    summary = (
        summarize_distribution([s.score for s in scores], bin_edges) if scores else None
    )
    return RelevanceReport(variant=variant, scored=len(scores), missing=missing, summary=summary)


class JudgeReport(BaseModel):
    dimensions: dict[str, DimensionResult]


def evaluate_judge(
    ctx: RunContext,
    candidate: str,
    original_caption: str,
    judge_ids: Sequence[str],
    image_ref: Optional[str] = None,
) -> JudgeReport:
    """Run the four-dimension judge ensemble against configured endpoints."""

    def transport(judge_id: str, dimension: JudgeDimension, prompt: str, wants_image: bool):
        endpoint = ctx.registry[judge_id]
        image_parts = []
        if wants_image and image_ref is not None:
            image_parts.append(image_part_from_file(ctx.image_path(image_ref)))
        payload = build_payload(
            prompt, image_parts, temperature=endpoint.temperature, top_p=endpoint.top_p
        )
        reply = ctx.caller.call(endpoint, payload, call_key=f"judge:{dimension.value}")
        return None if reply is None else reply.text

    results = judge_caption(candidate, original_caption, judge_ids, ctx.templates.judges, transport)
    return JudgeReport(dimensions=results)


def load_benchmark(path: str | Path) -> list[BenchmarkItem]:
    items = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                items.append(BenchmarkItem.model_validate_json(line))
    return items


def load_captions(path: str | Path) -> dict[str, list[str] | str]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def run_caption_qa_transform(
    benchmark_path: str | Path, captions_path: str | Path, output_path: Optional[str | Path] = None
) -> CaptionQATransformResult:
    result = transform_caption_qa(load_benchmark(benchmark_path), load_captions(captions_path))
    if output_path is not None:
        out = Path(output_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(
            "".join(item.model_dump_json(exclude_none=True) + "\n" for item in result.items),
            encoding="utf-8",
        )
    return result


def run_caption_qa_answers(
    ctx: RunContext, items: Sequence[CaptionQAItem], endpoint_id: str
) -> CaptionQAReport:
    endpoint = ctx.registry[endpoint_id]

    def transport(item: CaptionQAItem) -> Optional[str]:
        question = item.question_text
        if item.choices:
            listed = "\n".join(f"({chr(ord('A') + i)}) {c}" for i, c in enumerate(item.choices))
            question += "\nChoices:\n" + listed + "\nAnswer with the choice letter only."
        reply = ctx.caller.call(endpoint, build_payload(question), call_key=f"qa:{item.benchmark_id}")
        return None if reply is None else reply.text

    return answer_caption_qa(items, transport)


def stats_from_shard(shard_path: str | Path) -> CorpusStats:
    """Corpus statistics computed from shard records (shared tokenizer)."""
    records = read_shard_records(shard_path)
    triplets = []
    for record in records:
        triplets.append(
            Triplet(
                triplet_id=record.triplet_id,
                doc_id=record.doc_id,
                figure={
                    "figure_id": record.triplet_id,
                    "image_ref": record.image_path,
                    "width_px": record.width_px,
                    "height_px": record.height_px,
                    "page": 0,
                    "bbox": (0.0, 0.0, float(record.width_px), float(record.height_px)),
                    "subfigures": [],
                },
                raw_caption=record.raw_caption,
                figure_identifiers=["(shard)"],
                contexts=record.contexts,
                recaption=record.recaption,
                provenance=Provenance(),
            )
        )
    return corpus_stats(triplets)


def write_stats_report(stats: CorpusStats, out_dir: str | Path) -> dict[str, str]:
    """Emit the machine-readable report: JSON summary plus CSV histograms."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "corpus_stats.json"
    json_path.write_text(stats.model_dump_json(indent=2) + "\n", encoding="utf-8")
    paths = {"json": str(json_path)}
    for name, lengths in (("raw_caption", stats.raw_caption), ("recaption", stats.recaption)):
        if lengths is None:
            continue
        csv_path = out / f"{name}_length_histogram.csv"
        lines = ["word_count,occurrences"]
        lines.extend(f"{words},{count}" for words, count in lengths.histogram.items())
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths[name] = str(csv_path)
    return paths
