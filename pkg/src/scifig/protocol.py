"""Wire protocol for model endpoints.

Every endpoint, real or mock, speaks the same chat-style envelope:

POST {base_url}/v1/complete
request  {"messages": [{"role": "user", "content": [part, ...]}],
          "temperature": float, "top_p": float}
part     {"type": "text", "text": str}
         {"type": "image", "encoding": "base64" | "url", "data": str}
response {"text": str, "refused": bool, "score": float | null}

Credentials travel as a bearer token read from the endpoint's configured
environment variable; the body never carries secrets.
"""

from __future__ import annotations

import base64
from pathlib import Path
from typing import Iterable, Optional

COMPLETE_PATH = "/v1/complete"


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part_from_file(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    return {"type": "image", "encoding": "base64", "data": base64.b64encode(data).decode("ascii")}


def image_part_from_url(url: str) -> dict:
    return {"type": "image", "encoding": "url", "data": url}


def build_payload(
    text: str,
    image_parts: Iterable[dict] = (),
    temperature: float = 0.7,
    top_p: float = 0.9,
) -> dict:
    content: list[dict] = [text_part(text)]
    content.extend(image_parts)
    return {
        "messages": [{"role": "user", "content": content}],
        "temperature": temperature,
        "top_p": top_p,
    }


def payload_text(payload: dict) -> str:
    """Concatenated text parts of a request payload (mock-server helper)."""
    chunks = []
    for message in payload.get("messages", []):
        for part in message.get("content", []):
            if part.get("type") == "text":
                chunks.append(part.get("text", ""))
    return "\n".join(chunks)


def build_response(text: str, refused: bool = False, score: Optional[float] = None) -> dict:
    return {"text": text, "refused": refused, "score": score}
