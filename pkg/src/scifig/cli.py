"""Thin HTTP client for the pipeline service.

Every subcommand marshals its arguments into a service request and prints
the JSON response. By default the service runs in-process (same protocol,
ASGI transport); point --server / SCIFIG_SERVER at a remote instance to
drive a long-running deployment instead.

Exit codes: 0 ok, 1 data violations, 2 fatal (config or stage failure).
"""

from __future__ import annotations

import json
import sys
from typing import Optional

import click
import httpx

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_FATAL = 2


class ServiceClient:
    def __init__(self, server: Optional[str]):
        if server:
            self._client = httpx.Client(base_url=server.rstrip("/"), timeout=600.0)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())

    def post(self, path: str, payload: dict) -> tuple[int, dict]:
        response = self._client.post(path, json=payload)
        try:
            body = response.json()
        except json.JSONDecodeError:
            body = {"detail": {"error": response.text}}
        return response.status_code, body


def _emit(body: dict) -> None:
    click.echo(json.dumps(body, indent=2, sort_keys=True))


def _finish(status: int, body: dict) -> None:
    _emit(body)
    if status >= 400:
        sys.exit(EXIT_FATAL)


@click.group()
@click.option(
    "--server",
    envvar="SCIFIG_SERVER",
    default=None,
    help="Base URL of a running service; defaults to an in-process instance.",
)
@click.pass_context
def main(ctx: click.Context, server: Optional[str]) -> None:
    """Figure-caption-context curation pipeline client."""
    ctx.obj = ServiceClient(server)


def _stage_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path())(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--workers", type=int, default=None)(fn)
    fn = click.option("--output-dir", default=None, type=click.Path())(fn)
    return fn


def _stage_command(name: str):
    @main.command(name=name)
    @_stage_options
    @click.pass_obj
    def command(client: ServiceClient, config_path, seed, workers, output_dir):
        status, body = client.post(
            f"/v1/pipeline/{name}",
            {
                "config_path": config_path,
                "seed": seed,
                "workers": workers,
                "output_dir": output_dir,
            },
        )
        _finish(status, body)

    command.__doc__ = f"Run the pipeline through its {name} stage."
    return command


for _name in ("ingest", "extract", "filter", "recaption", "run-all"):
    _stage_command(_name)


@main.command()
@click.option("--shard", "shard_path", required=True, type=click.Path())
@click.pass_obj
def validate(client: ServiceClient, shard_path: str) -> None:
    """Validate a shard file against its manifest and record schema."""
    status, body = client.post("/v1/shards/validate", {"shard_path": shard_path})
    _emit(body)
    if status >= 400:
        sys.exit(EXIT_FATAL)
    if not body.get("ok", False):
        sys.exit(EXIT_VIOLATIONS)


@main.command()
@click.option("--shard", "shard_path", required=True, type=click.Path())
@click.option("--output-dir", default=None, type=click.Path())
@click.pass_obj
def stats(client: ServiceClient, shard_path: str, output_dir: Optional[str]) -> None:
    """Corpus statistics (caption lengths, context density) from a shard."""
    status, body = client.post("/v1/stats", {"shard_path": shard_path, "output_dir": output_dir})
    _finish(status, body)


@main.group()
def evaluate() -> None:
    """Caption quality evaluation protocols."""


@evaluate.command()
@click.option("--ratings-a", required=True, type=click.Path(exists=True), help="JSON array of 1-5 ratings.")
@click.option("--ratings-b", required=True, type=click.Path(exists=True), help="JSON array of 1-5 ratings.")
@click.pass_obj
def qwk(client: ServiceClient, ratings_a: str, ratings_b: str) -> None:
    """Quadratic weighted kappa between two rating files."""
    with open(ratings_a, encoding="utf-8") as fh:
        a = json.load(fh)
    with open(ratings_b, encoding="utf-8") as fh:
        b = json.load(fh)
    status, body = client.post("/v1/evaluate/qwk", {"ratings_a": a, "ratings_b": b})
    _finish(status, body)


@evaluate.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--shard", "shard_path", required=True, type=click.Path())
@click.option("--endpoint", "endpoint_id", required=True)
@click.option("--variant", type=click.Choice(["raw", "recaption", "model_generated"]), default="recaption")
@click.pass_obj
def relevance(client: ServiceClient, config_path, shard_path, endpoint_id, variant) -> None:
    """Image-caption relevance scores over a shard via a reranker endpoint."""
    status, body = client.post(
        "/v1/evaluate/relevance",
        {
            "config_path": config_path,
            "shard_path": shard_path,
            "endpoint_id": endpoint_id,
            "variant": variant,
        },
    )
    _finish(status, body)


@evaluate.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--candidate", required=True)
@click.option("--original-caption", required=True)
@click.option("--judge", "judge_ids", multiple=True, required=True)
@click.option("--image-ref", default=None)
@click.pass_obj
def judge(client: ServiceClient, config_path, candidate, original_caption, judge_ids, image_ref) -> None:
    """Four-dimension judge ensemble for one candidate caption."""
    status, body = client.post(
        "/v1/evaluate/judge",
        {
            "config_path": config_path,
            "candidate": candidate,
            "original_caption": original_caption,
            "judge_ids": list(judge_ids),
            "image_ref": image_ref,
        },
    )
    _finish(status, body)


@evaluate.command(name="caption-qa")
@click.option("--benchmark", "benchmark_path", required=True, type=click.Path())
@click.option("--captions", "captions_path", required=True, type=click.Path())
@click.option("--output", "output_path", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--answer-endpoint", "answer_endpoint_id", default=None)
@click.pass_obj
def caption_qa(client, benchmark_path, captions_path, output_path, config_path, answer_endpoint_id) -> None:
    """Replace benchmark visual placeholders with captions; optionally answer."""
    status, body = client.post(
        "/v1/evaluate/caption-qa",
        {
            "benchmark_path": benchmark_path,
            "captions_path": captions_path,
            "output_path": output_path,
            "config_path": config_path,
            "answer_endpoint_id": answer_endpoint_id,
        },
    )
    _finish(status, body)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host: str, port: int) -> None:
    """Run the pipeline service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


@main.command(name="mock-server")
@click.option("--behaviors", required=True, type=click.Path(exists=True), help="JSON or YAML behavior map.")
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8900, type=int)
def mock_server(behaviors: str, host: str, port: int) -> None:
    """Run the bundled mock model-endpoint server."""
    import uvicorn
    import yaml

    from .mockserver import create_mock_app

    with open(behaviors, encoding="utf-8") as fh:
        spec = yaml.safe_load(fh)
    uvicorn.run(create_mock_app(spec), host=host, port=port)


if __name__ == "__main__":
    main()
