"""Prompt assembly and generation post-processing for recaptioning."""

from __future__ import annotations

from typing import Optional, Sequence

from pydantic import BaseModel, Field

from .config import RECAPTION_PLACEHOLDERS, ConfigError, EndpointConfig
from .models import Triplet
from .protocol import build_payload, image_part_from_file
from .routing import Dispatcher, DispatchResult, RouteSelection
from .textutil import strip_code_fence

FEEDBACK_HEADER = "Previous attempt failed because:"


class RecaptionPrompt(BaseModel):
    template_id: str
    rendered_text: str
    image_parts: list[str] = Field(default_factory=list)


def serialize_contexts(contexts: Sequence[str]) -> str:
    """Numbered blocks keep paragraph boundaries explicit; empty list renders []."""
    if not contexts:
        return "[]"
    return "\n".join(f"[{i}] {paragraph}" for i, paragraph in enumerate(contexts, start=1))


def render_template(template_text: str, substitutions: dict[str, str]) -> str:
    """Literal placeholder replacement; templates may contain free braces."""
    rendered = template_text
    for placeholder, value in substitutions.items():
        rendered = rendered.replace(placeholder, value)
    return rendered


def build_prompt(triplet: Triplet, template_text: str, template_id: str = "recaption") -> RecaptionPrompt:
    """Substitute the raw caption and serialized contexts into the template.

    Template completeness is a startup check (see config.resolve_templates);
    an unsubstituted placeholder surviving to this point is a config bug, so
    it raises rather than producing a silently broken prompt.
    """
    rendered = render_template(
        template_text,
        {
            "{raw_caption_string}": triplet.raw_caption,
            "{context_list_of_string}": serialize_contexts(triplet.contexts),
        },
    )
    for placeholder in RECAPTION_PLACEHOLDERS:
        if placeholder in rendered:
            raise ConfigError(f"placeholder {placeholder} left unsubstituted")
    return RecaptionPrompt(
        template_id=template_id,
        rendered_text=rendered,
        image_parts=[triplet.figure.image_ref],
    )


def render_feedback(reasons: Sequence[str]) -> str:
    """Failure reasons accumulated across QA attempts, appended verbatim."""
    if not reasons:
        return ""
    lines = [FEEDBACK_HEADER]
    lines.extend(f"- {reason}" for reason in reasons)
    return "\n".join(lines)


def prompt_with_feedback(prompt: RecaptionPrompt, reasons: Sequence[str]) -> RecaptionPrompt:
    if not reasons:
        return prompt
    text = prompt.rendered_text + "\n\n" + render_feedback(reasons)
    return prompt.model_copy(update={"rendered_text": text})


def normalize_generation(text: str) -> str:
    """Trim whitespace and unwrap a whole-payload code fence."""
    return strip_code_fence(text)


def generate_recaption(
    triplet: Triplet,
    prompt: RecaptionPrompt,
    dispatcher: Dispatcher,
    selection: RouteSelection,
    endpoint: EndpointConfig,
    images_root: Optional[str] = None,
) -> tuple[Optional[str], DispatchResult]:
    """Send the rendered prompt plus figure image through the routed chain.

    Empty generations never reach here: the dispatcher classifies them as
    refusals so the fallback chain applies. Returns (text, dispatch result)
    with text None when the whole chain failed.
    """
    image_parts = []
    for ref in prompt.image_parts:
        path = ref if images_root is None else f"{images_root.rstrip('/')}/{ref}"
        image_parts.append(image_part_from_file(path))
    payload = build_payload(
        prompt.rendered_text,
        image_parts,
        temperature=endpoint.temperature,
        top_p=endpoint.top_p,
    )
    result = dispatcher.dispatch(triplet.triplet_id, selection, payload)
    if result.reply is None:
        return None, result
    return result.reply.text, result
