"""FastAPI service wrapping the pipeline and evaluation operations.

The service is stateless: every request names its config file, and the
server loads, validates, and runs it. Config problems map to 400, stage
failures to 500 with the failing stage named in the detail.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import ConfigError
from ..evaluation import quadratic_weighted_kappa, summarize_distribution
from ..models import CaptionVariant
from ..pipeline import StageFailure, load_context, run_until
from ..reports import (
    evaluate_judge,
    evaluate_relevance,
    run_caption_qa_answers,
    run_caption_qa_transform,
    stats_from_shard,
    write_stats_report,
)
from ..shard import validate_shard
from . import schemas

_STAGE_ROUTES = {
    "ingest": "ingest",
    "extract": "extract",
    "filter": "filter",
    "recaption": "recaption",
    "run-all": "shard",
}


def create_app() -> FastAPI:
    app = FastAPI(title="scifig pipeline service", version=__version__)

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    def _context(request: schemas.StageRunRequest):
        try:
            return load_context(
                request.config_path,
                seed=request.seed,
                workers=request.workers,
                output_dir=request.output_dir,
            )
        except ConfigError as exc:
            raise HTTPException(status_code=400, detail={"error": str(exc)}) from exc

    def _run(request: schemas.StageRunRequest, until: str) -> schemas.RunResponse:
        ctx = _context(request)
        try:
            report = run_until(ctx, until)
        except StageFailure as exc:
            raise HTTPException(
                status_code=500, detail={"error": exc.cause, "stage": exc.stage}
            ) from exc
        return schemas.RunResponse(report=report)

    for route_name, until_stage in _STAGE_ROUTES.items():

        def endpoint(
            request: schemas.StageRunRequest, _until: str = until_stage
        ) -> schemas.RunResponse:
            return _run(request, _until)

        app.post(
            f"/v1/pipeline/{route_name}",
            response_model=schemas.RunResponse,
            name=f"pipeline_{route_name.replace('-', '_')}",
        )(endpoint)

    @app.post("/v1/shards/validate", response_model=schemas.ValidateResponse)
    def shards_validate(request: schemas.ValidateRequest) -> schemas.ValidateResponse:
        violations = validate_shard(request.shard_path)
        return schemas.ValidateResponse(ok=not violations, violations=violations)

    @app.post("/v1/evaluate/qwk", response_model=schemas.QwkResponse)
    def evaluate_qwk(request: schemas.QwkRequest) -> schemas.QwkResponse:
        try:
            kappa = quadratic_weighted_kappa(request.ratings_a, request.ratings_b)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail={"error": str(exc)}) from exc
        return schemas.QwkResponse(kappa=kappa, pairs=len(request.ratings_a))

    @app.post("/v1/evaluate/distribution", response_model=schemas.DistributionResponse)
    def evaluate_distribution(request: schemas.DistributionRequest) -> schemas.DistributionResponse:
        try:
            summary = summarize_distribution(request.scores, request.bin_edges)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail={"error": str(exc)}) from exc
        return schemas.DistributionResponse(summary=summary)

    @app.post("/v1/evaluate/relevance", response_model=schemas.RelevanceResponse)
    def evaluate_relevance_route(request: schemas.RelevanceRequest) -> schemas.RelevanceResponse:
        ctx = _context(schemas.StageRunRequest(config_path=request.config_path))
        if request.endpoint_id not in ctx.registry:
            raise HTTPException(
                status_code=400, detail={"error": f"unknown endpoint {request.endpoint_id!r}"}
            )
        report = evaluate_relevance(
            ctx,
            request.shard_path,
            request.endpoint_id,
            variant=CaptionVariant(request.variant),
            bin_edges=request.bin_edges,
        )
        return schemas.RelevanceResponse(report=report)

    @app.post("/v1/evaluate/judge", response_model=schemas.JudgeResponse)
    def evaluate_judge_route(request: schemas.JudgeRequest) -> schemas.JudgeResponse:
        ctx = _context(schemas.StageRunRequest(config_path=request.config_path))
        unknown = [j for j in request.judge_ids if j not in ctx.registry]
        if unknown:
            raise HTTPException(status_code=400, detail={"error": f"unknown judges: {unknown}"})
        report = evaluate_judge(
            ctx,
            candidate=request.candidate,
            original_caption=request.original_caption,
            judge_ids=request.judge_ids,
            image_ref=request.image_ref,
        )
        return schemas.JudgeResponse(report=report)

    @app.post("/v1/evaluate/caption-qa", response_model=schemas.CaptionQAResponse)
    def evaluate_caption_qa(request: schemas.CaptionQARequest) -> schemas.CaptionQAResponse:
        try:
            result = run_caption_qa_transform(
                request.benchmark_path, request.captions_path, request.output_path
            )
        except (OSError, ValueError) as exc:
            raise HTTPException(status_code=400, detail={"error": str(exc)}) from exc
        answers = None
        accuracy = None
        if request.answer_endpoint_id is not None:
            if request.config_path is None:
                raise HTTPException(
                    status_code=400, detail={"error": "answering pass needs config_path"}
                )
            ctx = _context(schemas.StageRunRequest(config_path=request.config_path))
            if request.answer_endpoint_id not in ctx.registry:
                raise HTTPException(
                    status_code=400,
                    detail={"error": f"unknown endpoint {request.answer_endpoint_id!r}"},
                )
            answers = run_caption_qa_answers(ctx, result.items, request.answer_endpoint_id)
            accuracy = answers.accuracy
        return schemas.CaptionQAResponse(
            items=len(result.items),
            skipped=result.skipped,
            flagged=result.flagged,
            output_path=request.output_path,
            answers=answers,
            accuracy=accuracy,
        )

    @app.post("/v1/stats", response_model=schemas.StatsResponse)
    def stats(request: schemas.StatsRequest) -> schemas.StatsResponse:
        try:
            result = stats_from_shard(request.shard_path)
        except (OSError, ValueError) as exc:
            raise HTTPException(status_code=400, detail={"error": str(exc)}) from exc
        paths = write_stats_report(result, request.output_dir) if request.output_dir else {}
        return schemas.StatsResponse(stats=result, report_paths=paths)

    return app


app = create_app()
