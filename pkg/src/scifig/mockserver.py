"""Bundled mock model-endpoint server.

Implements the chat completion envelope from scifig.protocol so pipeline
runs and integration tests exercise real request marshalling without any
vendor API. Behaviors are configured per endpoint name:

  {"mode": "recaption"}                    deterministic dense text derived
                                           from the request payload
  {"mode": "echo", "text": ...}            fixed reply
  {"mode": "refuse"}                       refusal flag set
  {"mode": "error", "status": 500}         HTTP error
  {"mode": "score", "value": 0.9}          reranker-style score reply
  {"mode": "fact_check", "verdict": {...}} JSON verdict (defaults to a pass)
  {"mode": "match", "rules": [{"contains": ..., "text": ...}],
   "default_text": ...}                    first rule whose substring occurs
                                           in the prompt wins (used for
                                           judge dimensions)
  {"mode": "script", "steps": [...]}       stateful: one step per request,
                                           each step itself a behavior;
                                           the last step repeats
"""

from __future__ import annotations

import hashlib
import json
import threading
from typing import Optional

from fastapi import FastAPI, HTTPException

from .protocol import build_response, payload_text

_PASS_VERDICT = {
    "has_hallucination": False,
    "hallucination_type": "None",
    "severity_score": 1,
    "reason": "No hallucination detected",
}


def _recaption_text(prompt: str) -> str:
    digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:12]
    return (
        f"Synthetic dense description {digest}. The primary series rises "
        "monotonically across the plotted range and saturates near the final "
        "abscissa, consistent with the source paragraphs. Panel annotations "
        "follow the caption order, and the reported values match the stated "
        "measurement conditions."
    )


class _ScriptState:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._cursor: dict[str, int] = {}

    def next_index(self, endpoint: str, length: int) -> int:
        with self._lock:
            index = self._cursor.get(endpoint, 0)
            self._cursor[endpoint] = index + 1
            return min(index, length - 1)


def create_mock_app(behaviors: dict[str, dict]) -> FastAPI:
    app = FastAPI(title="scifig mock endpoints")
    state = _ScriptState()

    def run_behavior(endpoint: str, behavior: dict, payload: dict) -> dict:
        mode = behavior.get("mode", "echo")
        if mode == "script":
            steps = behavior.get("steps", [])
            if not steps:
                raise HTTPException(500, "script behavior without steps")
            step = steps[state.next_index(endpoint, len(steps))]
            return run_behavior(endpoint, step, payload)
        if mode == "recaption":
            return build_response(_recaption_text(payload_text(payload)))
        if mode == "echo":
            return build_response(behavior.get("text", ""))
        if mode == "refuse":
            return build_response(behavior.get("text", "I cannot assist with this request."), refused=True)
        if mode == "error":
            raise HTTPException(int(behavior.get("status", 500)), "scripted failure")
        if mode == "score":
            return build_response("", score=float(behavior.get("value", 0.5)))
        if mode == "fact_check":
            verdict = behavior.get("verdict", _PASS_VERDICT)
            return build_response(json.dumps(verdict))
        if mode == "match":
            prompt = payload_text(payload).lower()
            for rule in behavior.get("rules", []):
                if rule.get("contains", "").lower() in prompt:
                    return build_response(rule.get("text", ""))
            default: Optional[str] = behavior.get("default_text")
            if default is None:
                raise HTTPException(500, "no match rule applied")
            return build_response(default)
        raise HTTPException(500, f"unknown mock mode {mode!r}")

    @app.post("/endpoints/{endpoint}/v1/complete")
    def complete(endpoint: str, payload: dict) -> dict:
        behavior = behaviors.get(endpoint)
        if behavior is None:
            raise HTTPException(404, f"no mock behavior for endpoint {endpoint!r}")
        return run_behavior(endpoint, behavior, payload)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "endpoints": sorted(behaviors)}

    return app
