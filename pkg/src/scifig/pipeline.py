"""Pipeline runner: stage sequencing, checkpoints, audit log, shard output.

Stages run in a fixed order (ingest, extract, filter, recaption, shard) and
checkpoint at stage x document granularity, so an interrupted run resumes
where it stopped and, with deterministic endpoints and a fixed seed, still
produces byte-identical shards. All randomness flows from the config seed.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import httpx
from PIL import Image
from pydantic import BaseModel, Field, ValidationError

from . import __version__
from .config import (
    ConfigError,
    EndpointConfig,
    FigureClassRules,
    PipelineConfig,
    ResolvedTemplates,
    RoutingPolicy,
    TaxonomyConfig,
    compile_identifier_patterns,
    config_digest,
    load_figure_classes,
    load_pipeline_config,
    load_policy,
    load_taxonomy,
    resolve_templates,
)
from .extraction import (
    bind_figure_captions,
    extract_contexts,
    map_subfigures,
    parse_figure_identifiers,
    sanitize_caption,
)
from .filtering import (
    ImageDecodeError,
    PerceptualHash,
    caption_quality_filter,
    dedup_figures_within_article,
    figure_quality_filter,
    phash_file,
)
from .metadata import ingest_records
from .models import DocumentRecord, FigureAsset, LayoutDocument, Triplet
from .protocol import build_payload, image_part_from_file
from .quality import GenerationAttempt, regeneration_loop
from .recaption import build_prompt, generate_recaption, prompt_with_feedback, render_template, serialize_contexts
from .routing import (
    Dispatcher,
    EndpointCaller,
    HttpChatBackend,
    categorize_figure,
    route,
    validate_policy,
)
from .shard import Manifest, ShardRecord, record_from_triplet, shard_attempts, write_shard_set
from .textutil import stable_seed

log = logging.getLogger(__name__)

STAGES = ("ingest", "extract", "filter", "recaption", "shard")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: str):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class AuditLog:
    """Append-only NDJSON event log; timestamp-free so reruns diff cleanly."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)

    def write(
        self,
        stage: str,
        event: str,
        doc_id: Optional[str] = None,
        item: Optional[str] = None,
        reason: Optional[str] = None,
    ) -> None:
        entry = {"stage": stage, "event": event}
        if doc_id is not None:
            entry["doc_id"] = doc_id
        if item is not None:
            entry["item"] = item
        if reason is not None:
            entry["reason"] = reason
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


@dataclass
class RunContext:
    cfg: PipelineConfig
    config_path: Path
    base_dir: Path
    out_dir: Path
    templates: ResolvedTemplates
    taxonomy: TaxonomyConfig
    classes: FigureClassRules
    policy: RoutingPolicy
    registry: dict[str, EndpointConfig]
    patterns: list
    caller: EndpointCaller
    dispatcher: Dispatcher
    digest: str
    audit: AuditLog

    @property
    def metadata_path(self) -> Path:
        return self._resolve(self.cfg.input.metadata)

    @property
    def layouts_dir(self) -> Path:
        return self._resolve(self.cfg.input.layouts)

    @property
    def images_root(self) -> Path:
        return self._resolve(self.cfg.input.images_root)

    def _resolve(self, raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def image_path(self, image_ref: str) -> Path:
        return self.images_root / image_ref

    def checkpoint_dir(self, stage: str) -> Path:
        d = self.out_dir / "checkpoints" / stage
        d.mkdir(parents=True, exist_ok=True)
        return d


def _make_backend(cfg: PipelineConfig) -> HttpChatBackend:
    if cfg.mock_backend.enabled:
        from fastapi.testclient import TestClient

        from .mockserver import create_mock_app

        app = create_mock_app(cfg.mock_backend.behaviors)
        return HttpChatBackend(lambda: TestClient(app))
    return HttpChatBackend(lambda: httpx.Client())


def load_context(
    config_path: str | Path,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> RunContext:
    """Load and fully validate a run configuration.

    Every reference (templates, policy endpoints, taxonomy, input paths) is
    resolved here; a dangling one aborts before any processing starts.
    """
    path = Path(config_path)
    cfg = load_pipeline_config(path)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if workers is not None:
        overrides["workers"] = workers
    if output_dir is not None:
        overrides["output_dir"] = output_dir
    if overrides:
        cfg = cfg.model_copy(update=overrides)

    base_dir = path.parent
    templates = resolve_templates(cfg, base_dir)
    taxonomy = load_taxonomy(cfg.taxonomy_path, base_dir)
    classes = load_figure_classes(cfg.figure_classes_path, base_dir)
    policy = load_policy(cfg.policy_path, base_dir)

    registry: dict[str, EndpointConfig] = {}
    for endpoint in cfg.endpoints:
        if endpoint.endpoint_id in registry:
            raise ConfigError(f"duplicate endpoint id {endpoint.endpoint_id!r}")
        registry[endpoint.endpoint_id] = endpoint
    try:
        validate_policy(policy, registry)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for label, endpoint_id in (("checker", cfg.checker_endpoint), ("resolver", cfg.resolver_endpoint)):
        if endpoint_id is not None and endpoint_id not in registry:
            raise ConfigError(f"{label}_endpoint {endpoint_id!r} not in endpoint registry")

    patterns = compile_identifier_patterns(cfg.identifier_patterns)

    def resolve_input(raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else base_dir / p

    if not resolve_input(cfg.input.metadata).is_file():
        raise ConfigError(f"metadata file not found: {cfg.input.metadata}")
    if not resolve_input(cfg.input.layouts).is_dir():
        raise ConfigError(f"layouts directory not found: {cfg.input.layouts}")
    if not resolve_input(cfg.input.images_root).is_dir():
        raise ConfigError(f"images root not found: {cfg.input.images_root}")

    out_raw = Path(cfg.output_dir)
    out_dir = out_raw if out_raw.is_absolute() else base_dir / out_raw
    out_dir.mkdir(parents=True, exist_ok=True)

    caller = EndpointCaller(
        backend=_make_backend(cfg),
        refusal_markers=[m.lower() for m in cfg.refusal_markers],
        backoff_base_s=cfg.backoff.base_s,
        backoff_factor=cfg.backoff.factor,
        backoff_jitter=cfg.backoff.jitter,
    )
    dispatcher = Dispatcher(registry=registry, policy=policy, caller=caller)
    return RunContext(
        cfg=cfg,
        config_path=path,
        base_dir=base_dir,
        out_dir=out_dir,
        templates=templates,
        taxonomy=taxonomy,
        classes=classes,
        policy=policy,
        registry=registry,
        patterns=patterns,
        caller=caller,
        dispatcher=dispatcher,
        digest=config_digest(path),
        audit=AuditLog(out_dir / "audit.jsonl"),
    )


# --------------------------------------------------------------------------
# ingest


class IngestCheckpoint(BaseModel):
    kept: list[DocumentRecord]
    dropped: list[tuple[str, str]] = Field(default_factory=list)


def _read_metadata(ctx: RunContext) -> list[DocumentRecord]:
    records: list[DocumentRecord] = []
    with ctx.metadata_path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(DocumentRecord.model_validate_json(line))
            except ValidationError as exc:
                ctx.audit.write("ingest", "failed", item=f"line {line_no}", reason=str(exc.errors()[0]["msg"]))
    return records


def _make_resolver(ctx: RunContext):
    if ctx.cfg.resolver_endpoint is None:
        return None
    endpoint = ctx.registry[ctx.cfg.resolver_endpoint]

    def resolve(prompt: str) -> str:
        reply = ctx.caller.call(endpoint, build_payload(prompt), call_key=prompt[:64])
        if reply is None:
            raise RuntimeError("discipline resolver unreachable")
        return reply.text

    return resolve


def stage_ingest(ctx: RunContext) -> IngestCheckpoint:
    checkpoint = ctx.checkpoint_dir("ingest") / "records.json"
    if checkpoint.is_file():
        return IngestCheckpoint.model_validate_json(checkpoint.read_text(encoding="utf-8"))
    if not ctx.cfg.stages.ingest:
        raise StageFailure("ingest", "stage disabled and no checkpoint present")
    records = _read_metadata(ctx)
    result = ingest_records(
        records,
        ctx.taxonomy,
        resolver=_make_resolver(ctx),
        license_denylist=ctx.cfg.license_denylist,
    )
    for rec in result.kept:
        ctx.audit.write("ingest", "emitted", doc_id=rec.doc_id)
    for doc_id, reason in result.dropped:
        ctx.audit.write("ingest", "filtered", doc_id=doc_id, reason=reason)
    out = IngestCheckpoint(kept=result.kept, dropped=result.dropped)
    checkpoint.write_text(out.model_dump_json(), encoding="utf-8")
    return out


# --------------------------------------------------------------------------
# extract


class DocExtractCheckpoint(BaseModel):
    doc_id: str
    triplets: list[Triplet]
    exclusions: list[tuple[str, str]] = Field(default_factory=list)


def extract_document(ctx: RunContext, doc: LayoutDocument) -> DocExtractCheckpoint:
    binding = bind_figure_captions(
        doc, window=ctx.cfg.binding_window, confidence_threshold=ctx.cfg.confidence_threshold
    )
    exclusions: list[tuple[str, str]] = [
        (f"ro{ex.figure.reading_order_index}", ex.reason) for ex in binding.excluded
    ]
    triplets: list[Triplet] = []
    for ordinal, pair in enumerate(binding.bound, start=1):
        fid = f"{doc.doc_id}-f{ordinal:03d}"
        caption = sanitize_caption(pair.caption.text or "")
        identifiers = parse_figure_identifiers(caption, ctx.patterns)
        if not identifiers:
            exclusions.append((fid, "no figure identifier"))
            continue
        image_ref = pair.figure.image_ref or ""
        try:
            with Image.open(ctx.image_path(image_ref)) as img:
                width, height = img.size
        except (OSError, ValueError) as exc:
            log.info("doc %s figure %s: %s", doc.doc_id, fid, exc)
            exclusions.append((fid, "decode failure"))
            continue
        figure = FigureAsset(
            figure_id=fid,
            image_ref=image_ref,
            width_px=width,
            height_px=height,
            page=pair.figure.page,
            bbox=pair.figure.bbox,
        )
        figure = map_subfigures(figure, doc.ocr_tokens.get(image_ref, []), caption, ctx.classes)
        triplets.append(
            Triplet(
                triplet_id=fid,
                doc_id=doc.doc_id,
                figure=figure,
                raw_caption=caption,
                figure_identifiers=identifiers,
                contexts=extract_contexts(doc, identifiers, ctx.patterns),
            )
        )
    return DocExtractCheckpoint(doc_id=doc.doc_id, triplets=triplets, exclusions=exclusions)


def stage_extract(ctx: RunContext, kept_records: Sequence[DocumentRecord]) -> dict[str, list[Triplet]]:
    by_doc: dict[str, list[Triplet]] = {}
    meta_ids = {rec.doc_id for rec in kept_records}
    seen_layouts: set[str] = set()
    checkpoint_dir = ctx.checkpoint_dir("extract")
    for layout_file in sorted(ctx.layouts_dir.glob("*.json")):
        try:
            doc = LayoutDocument.model_validate_json(layout_file.read_text(encoding="utf-8"))
        except ValidationError as exc:
            ctx.audit.write("extract", "failed", item=layout_file.name, reason=str(exc.errors()[0]["msg"]))
            continue
        seen_layouts.add(doc.doc_id)
        if doc.doc_id not in meta_ids:
            ctx.audit.write("extract", "filtered", doc_id=doc.doc_id, reason="no kept metadata record")
            continue
        checkpoint = checkpoint_dir / f"{doc.doc_id}.json"
        if checkpoint.is_file():
            out = DocExtractCheckpoint.model_validate_json(checkpoint.read_text(encoding="utf-8"))
        else:
            if not ctx.cfg.stages.extract:
                raise StageFailure("extract", f"stage disabled and no checkpoint for {doc.doc_id}")
            out = extract_document(ctx, doc)
            for triplet in out.triplets:
                ctx.audit.write("extract", "emitted", doc_id=doc.doc_id, item=triplet.triplet_id)
            for item, reason in out.exclusions:
                ctx.audit.write("extract", "filtered", doc_id=doc.doc_id, item=item, reason=reason)
            checkpoint.write_text(out.model_dump_json(), encoding="utf-8")
        by_doc[doc.doc_id] = out.triplets
    for rec in kept_records:
        if rec.doc_id not in seen_layouts:
            ctx.audit.write("extract", "filtered", doc_id=rec.doc_id, reason="no layout document")
    return by_doc


# --------------------------------------------------------------------------
# filter


class DocFilterCheckpoint(BaseModel):
    doc_id: str
    kept: list[Triplet]
    rejections: list[tuple[str, str]] = Field(default_factory=list)


def filter_document(ctx: RunContext, doc_id: str, triplets: Sequence[Triplet]) -> DocFilterCheckpoint:
    hashes: dict[str, PerceptualHash] = {}
    hashable: list[Triplet] = []
    rejections: list[tuple[str, str]] = []
    for triplet in triplets:
        try:
            hashes[triplet.figure.figure_id] = phash_file(ctx.image_path(triplet.figure.image_ref))
        except (ImageDecodeError, ValueError):
            rejections.append((triplet.triplet_id, "decode failure"))
            continue
        hashable.append(triplet)

    kept_figures, dropped = dedup_figures_within_article(
        [t.figure for t in hashable], hashes, ctx.cfg.filter
    )
    kept_ids = {fig.figure_id for fig in kept_figures}
    rejections.extend((fid, reason) for fid, reason in dropped)

    kept: list[Triplet] = []
    for triplet in hashable:
        if triplet.figure.figure_id not in kept_ids:
            continue
        decision = figure_quality_filter(triplet.figure, ctx.cfg.filter)
        if not decision.accepted:
            rejections.append((triplet.triplet_id, decision.reason or "figure quality"))
            continue
        decision = caption_quality_filter(triplet, ctx.cfg.filter)
        if not decision.accepted:
            rejections.append((triplet.triplet_id, decision.reason or "caption quality"))
            continue
        kept.append(triplet)
    return DocFilterCheckpoint(doc_id=doc_id, kept=kept, rejections=rejections)


def stage_filter(ctx: RunContext, by_doc: dict[str, list[Triplet]]) -> dict[str, list[Triplet]]:
    out: dict[str, list[Triplet]] = {}
    checkpoint_dir = ctx.checkpoint_dir("filter")
    for doc_id in sorted(by_doc):
        checkpoint = checkpoint_dir / f"{doc_id}.json"
        if checkpoint.is_file():
            result = DocFilterCheckpoint.model_validate_json(checkpoint.read_text(encoding="utf-8"))
        else:
            if not ctx.cfg.stages.filter:
                raise StageFailure("filter", f"stage disabled and no checkpoint for {doc_id}")
            result = filter_document(ctx, doc_id, by_doc[doc_id])
            for triplet in result.kept:
                ctx.audit.write("filter", "emitted", doc_id=doc_id, item=triplet.triplet_id)
            for item, reason in result.rejections:
                ctx.audit.write("filter", "filtered", doc_id=doc_id, item=item, reason=reason)
            checkpoint.write_text(result.model_dump_json(), encoding="utf-8")
        out[doc_id] = result.kept
    return out


# --------------------------------------------------------------------------
# recaption


def _make_checker(ctx: RunContext):
    if ctx.cfg.checker_endpoint is None:
        return None
    endpoint = ctx.registry[ctx.cfg.checker_endpoint]

    def checker(candidate: str, triplet: Triplet, reask: bool) -> Optional[str]:
        text = render_template(
            ctx.templates.fact_check,
            {
                "{raw_caption_string}": triplet.raw_caption,
                "{context_list_of_string}": serialize_contexts(triplet.contexts),
                "{candidate_string}": candidate,
            },
        )
        if reask:
            text += "\n\nYour previous reply was not valid JSON. Return only the JSON object."
        payload = build_payload(
            text,
            [image_part_from_file(ctx.image_path(triplet.figure.image_ref))],
            temperature=endpoint.temperature,
            top_p=endpoint.top_p,
        )
        reply = ctx.caller.call(endpoint, payload, call_key=f"{triplet.triplet_id}:fact:{reask}")
        return None if reply is None else reply.text

    return checker


def recaption_triplet(ctx: RunContext, triplet: Triplet, subject_area: str, checker) -> Triplet:
    category = categorize_figure(triplet, ctx.classes, subject_area=subject_area)
    base_prompt = build_prompt(triplet, ctx.templates.recaption)

    def generate(t: Triplet, feedback: Sequence[str], attempt_index: int) -> GenerationAttempt:
        selection = route(
            category, ctx.policy, stable_seed(ctx.cfg.seed, "route", t.triplet_id, attempt_index)
        )
        prompt = prompt_with_feedback(base_prompt, feedback)
        text, result = generate_recaption(
            t,
            prompt,
            ctx.dispatcher,
            selection,
            ctx.registry[selection.endpoint_id],
            images_root=str(ctx.images_root),
        )
        return GenerationAttempt(text=text, attempts=result.decision.attempts)

    loop = regeneration_loop(
        triplet,
        generate,
        checker,
        max_attempts=ctx.cfg.max_attempts,
        max_words=ctx.cfg.max_recaption_words,
        repetition_cfg=ctx.cfg.repetition,
    )
    provenance = triplet.provenance.model_copy(
        update={
            "attempts": list(triplet.provenance.attempts) + loop.attempts,
            "qa_history": list(triplet.provenance.qa_history) + loop.history,
            "flags": list(triplet.provenance.flags)
            + ([loop.rejection_reason] if loop.rejection_reason else []),
        }
    )
    return triplet.model_copy(update={"recaption": loop.recaption, "provenance": provenance})


def stage_recaption(
    ctx: RunContext,
    by_doc: dict[str, list[Triplet]],
    records: Sequence[DocumentRecord],
) -> list[Triplet]:
    subject_by_doc = {
        rec.doc_id: (rec.disciplines[0] if rec.disciplines else "") for rec in records
    }
    ordered = sorted(
        (t for triplets in by_doc.values() for t in triplets), key=lambda t: t.triplet_id
    )
    if not ctx.cfg.stages.recaption:
        return ordered

    checkpoint_dir = ctx.checkpoint_dir("recaption")
    checker = _make_checker(ctx)

    def work(triplet: Triplet) -> Triplet:
        checkpoint = checkpoint_dir / f"{triplet.triplet_id}.json"
        if checkpoint.is_file():
            return Triplet.model_validate_json(checkpoint.read_text(encoding="utf-8"))
        done = recaption_triplet(ctx, triplet, subject_by_doc.get(triplet.doc_id, ""), checker)
        checkpoint.write_text(done.model_dump_json(), encoding="utf-8")
        return done

    workers = max(1, ctx.cfg.workers)
    if workers == 1:
        results = [work(t) for t in ordered]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, ordered))
    # commit in triplet_id order regardless of completion order
    for triplet in results:
        reason = next((f for f in triplet.provenance.flags if f), None)
        ctx.audit.write(
            "recaption",
            "emitted" if triplet.recaption is not None else "kept raw caption",
            doc_id=triplet.doc_id,
            item=triplet.triplet_id,
            reason=None if triplet.recaption is not None else reason,
        )
    return results


# --------------------------------------------------------------------------
# shard + reports


class ShardInfo(BaseModel):
    path: str
    record_count: int
    content_digest: str


class StageReport(BaseModel):
    stage: str
    emitted: int
    dropped: int


class RunReport(BaseModel):
    out_dir: str
    stages: list[StageReport]
    shards: list[ShardInfo]
    audit_path: str


def stage_shard(
    ctx: RunContext, triplets: Sequence[Triplet], records: Sequence[DocumentRecord]
) -> list[tuple[Path, Manifest]]:
    disciplines = {rec.doc_id: rec.disciplines for rec in records}
    shard_records = [
        record_from_triplet(t, disciplines.get(t.doc_id, [])) for t in triplets
    ]
    written = write_shard_set(
        shard_records,
        ctx.out_dir / "shards",
        config_digest=ctx.digest,
        pipeline_version=__version__,
        max_records_per_shard=ctx.cfg.max_records_per_shard,
    )
    for record in sorted(shard_records, key=lambda r: r.triplet_id):
        ctx.audit.write("shard", "emitted", doc_id=record.doc_id, item=record.triplet_id)
    return written


def run_until(ctx: RunContext, until: str = "shard") -> RunReport:
    """Run stages in order up to and including `until`.

    Per-stage CLI commands use earlier cutoffs; a later run-all resumes
    from whatever checkpoints those runs left behind. A stage that blows
    up surfaces as StageFailure with its name; its checkpoints survive.
    """
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}")
    cutoff = STAGES.index(until)
    stages: list[StageReport] = []

    def guarded(stage: str, fn, *args):
        try:
            return fn(ctx, *args)
        except (StageFailure, ConfigError):
            raise
        except Exception as exc:  # checkpoint files stay behind for resume
            log.exception("stage %s failed", stage)
            raise StageFailure(stage, str(exc)) from exc

    shards: list[ShardInfo] = []
    ingest = guarded("ingest", stage_ingest)
    stages.append(StageReport(stage="ingest", emitted=len(ingest.kept), dropped=len(ingest.dropped)))

    if cutoff >= 1:
        extracted = guarded("extract", stage_extract, ingest.kept)
        n_extracted = sum(len(v) for v in extracted.values())
        stages.append(StageReport(stage="extract", emitted=n_extracted, dropped=0))
    if cutoff >= 2:
        filtered = guarded("filter", stage_filter, extracted)
        n_filtered = sum(len(v) for v in filtered.values())
        stages.append(StageReport(stage="filter", emitted=n_filtered, dropped=n_extracted - n_filtered))
    if cutoff >= 3:
        recaptioned = guarded("recaption", stage_recaption, filtered, ingest.kept)
        n_done = sum(1 for t in recaptioned if t.recaption is not None)
        stages.append(
            StageReport(stage="recaption", emitted=n_done, dropped=len(recaptioned) - n_done)
        )
    if cutoff >= 4:
        written = guarded("shard", stage_shard, recaptioned, ingest.kept)
        stages.append(
            StageReport(stage="shard", emitted=sum(m.record_count for _, m in written), dropped=0)
        )
        shards = [
            ShardInfo(path=str(path), record_count=m.record_count, content_digest=m.content_digest)
            for path, m in written
        ]

    return RunReport(
        out_dir=str(ctx.out_dir), stages=stages, shards=shards, audit_path=str(ctx.audit.path)
    )


def run_pipeline(ctx: RunContext) -> RunReport:
    return run_until(ctx, "shard")
