"""Dataset shard persistence and validation.

Shards are newline-delimited JSON, one triplet record per line, sorted by
triplet_id, with a sidecar manifest carrying a digest of the exact file
bytes. Attempt records in shards drop latency on purpose: wall-clock noise
would break reproducible bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, Field, ValidationError

from .models import Attempt, AttemptOutcome, QAVerdict, SubFigure, Triplet


class ShardAttempt(BaseModel):
    endpoint: str
    outcome: AttemptOutcome


class ShardRecord(BaseModel):
    triplet_id: str
    doc_id: str
    disciplines: list[str] = Field(default_factory=list)
    image_path: str
    width_px: int = Field(gt=0)
    height_px: int = Field(gt=0)
    subfigures: list[SubFigure] = Field(default_factory=list)
    raw_caption: str
    contexts: list[str] = Field(default_factory=list)
    recaption: Optional[str] = None
    qa_history: list[QAVerdict] = Field(default_factory=list)
    routing_attempts: list[ShardAttempt] = Field(default_factory=list)


class Manifest(BaseModel):
    record_count: int
    content_digest: str
    pipeline_version: str
    config_digest: str


def record_from_triplet(triplet: Triplet, disciplines: Sequence[str]) -> ShardRecord:
    return ShardRecord(
        triplet_id=triplet.triplet_id,
        doc_id=triplet.doc_id,
        disciplines=list(disciplines),
        image_path=triplet.figure.image_ref,
        width_px=triplet.figure.width_px,
        height_px=triplet.figure.height_px,
        subfigures=triplet.figure.subfigures,
        raw_caption=triplet.raw_caption,
        contexts=triplet.contexts,
        recaption=triplet.recaption,
        qa_history=triplet.provenance.qa_history,
        routing_attempts=[
            ShardAttempt(endpoint=a.endpoint, outcome=a.outcome) for a in triplet.provenance.attempts
        ],
    )


def shard_attempts(attempts: Sequence[Attempt]) -> list[ShardAttempt]:
    return [ShardAttempt(endpoint=a.endpoint, outcome=a.outcome) for a in attempts]


def manifest_path(shard_path: str | Path) -> Path:
    p = Path(shard_path)
    return p.with_name(p.stem + ".manifest.json")


def file_digest(path: str | Path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_shard(
    records: Sequence[ShardRecord],
    path: str | Path,
    config_digest: str,
    pipeline_version: str,
) -> Manifest:
    """Write one shard plus its manifest; records are sorted here, not trusted."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=lambda r: r.triplet_id)
    lines = [r.model_dump_json(exclude_none=True) for r in ordered]
    p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    manifest = Manifest(
        record_count=len(ordered),
        content_digest=file_digest(p),
        pipeline_version=pipeline_version,
        config_digest=config_digest,
    )
    manifest_path(p).write_text(
        json.dumps(manifest.model_dump(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


def write_shard_set(
    records: Sequence[ShardRecord],
    out_dir: str | Path,
    config_digest: str,
    pipeline_version: str,
    max_records_per_shard: int = 50000,
) -> list[tuple[Path, Manifest]]:
    """Split sorted records into numbered shards. An empty run still writes
    one empty shard so downstream consumers always find a manifest."""
    out = Path(out_dir)
    ordered = sorted(records, key=lambda r: r.triplet_id)
    chunks = [ordered[i : i + max_records_per_shard] for i in range(0, len(ordered), max_records_per_shard)]
    if not chunks:
        chunks = [[]]
    written: list[tuple[Path, Manifest]] = []
    for index, chunk in enumerate(chunks):
        path = out / f"shard-{index:05d}.jsonl"
        written.append((path, write_shard(chunk, path, config_digest, pipeline_version)))
    return written


def read_shard_records(path: str | Path) -> list[ShardRecord]:
    """Strict NDJSON load; use validate_shard for diagnostics instead of errors."""
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ShardRecord.model_validate_json(line))
    return records


def validate_shard(path: str | Path) -> list[str]:
    """Check manifest digest, record schema, sort order, and type invariants.

    Returns a list of violations; empty means the shard is sound.
    """
    violations: list[str] = []
    p = Path(path)
    if not p.is_file():
        return [f"shard file not found: {p}"]
    mp = manifest_path(p)
    manifest: Optional[Manifest] = None
    if not mp.is_file():
        violations.append(f"manifest not found: {mp}")
    else:
        try:
            manifest = Manifest.model_validate_json(mp.read_text(encoding="utf-8"))
        except ValidationError as exc:
            violations.append(f"manifest invalid: {exc.errors()[0]['msg']}")
    if manifest is not None:
        actual = file_digest(p)
        if actual != manifest.content_digest:
            violations.append(f"content digest mismatch: manifest {manifest.content_digest}, file {actual}")

    count = 0
    previous_id: Optional[str] = None
    with p.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                violations.append(f"line {line_no}: blank line")
                continue
            count += 1
            try:
                record = ShardRecord.model_validate_json(line)
            except ValidationError as exc:
                first = exc.errors()[0]
                where = ".".join(str(loc) for loc in first["loc"])
                violations.append(f"line {line_no}: {where}: {first['msg']}")
                continue
            if previous_id is not None and record.triplet_id <= previous_id:
                violations.append(f"line {line_no}: records not sorted by triplet_id")
            previous_id = record.triplet_id
    if manifest is not None and count != manifest.record_count:
        violations.append(f"record count mismatch: manifest {manifest.record_count}, file {count}")
    return violations
