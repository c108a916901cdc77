"""Configuration models and loaders.

Everything the pipeline reads at startup is validated here, before any
document is touched: endpoint registry, routing policy, prompt templates,
taxonomy, and figure-class keyword rules. A dangling reference is a
ConfigError, never a mid-run surprise.
"""

from __future__ import annotations

import hashlib
import re
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    """Raised for any invalid or dangling configuration reference."""


RECAPTION_PLACEHOLDERS = ("{raw_caption_string}", "{context_list_of_string}")
FACT_CHECK_PLACEHOLDERS = ("{raw_caption_string}", "{context_list_of_string}", "{candidate_string}")
JUDGE_PLACEHOLDERS = {
    "language_fluency": ("{model_prediction}",),
    "information_consistency": ("{model_prediction}",),
    "key_information_accuracy": ("{model_prediction}",),
    "detail_level": ("{model_prediction}", "{original_caption}"),
}

DEFAULT_REFUSAL_MARKERS = (
    "i'm sorry, but i can't",
    "i cannot assist with",
    "i can't help with that",
    "unable to comply",
)


class FilterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    phash_similarity_threshold: float = 0.965
    min_width_px: int = 200
    min_height_px: int = 200
    max_aspect_ratio: float = 8.0
    min_caption_words_without_context: int = 10

    @model_validator(mode="after")
    def _bounds(self) -> "FilterConfig":
        if not (0.0 < self.phash_similarity_threshold <= 1.0):
            raise ValueError("phash_similarity_threshold must lie in (0, 1]")
        if self.min_width_px <= 0 or self.min_height_px <= 0:
            raise ValueError("minimum dimensions must be positive")
        if self.max_aspect_ratio <= 1.0:
            raise ValueError("max_aspect_ratio must exceed 1")
        return self


class ScoreMap(BaseModel):
    """Mapping from an endpoint's native score range onto [0, 1]."""

    kind: str = "identity"  # identity | linear
    minimum: float = 0.0
    maximum: float = 1.0

    def apply(self, raw: float) -> float:
        if self.kind == "identity":
            value = raw
        elif self.kind == "linear":
            span = self.maximum - self.minimum
            if span <= 0:
                raise ConfigError("linear score_map needs maximum > minimum")
            value = (raw - self.minimum) / span
        else:
            raise ConfigError(f"unknown score_map kind {self.kind!r}")
        return min(1.0, max(0.0, value))


class EndpointConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    endpoint_id: str
    base_url: str
    credential_env_var: Optional[str] = None
    rate_limit: float = Field(default=50.0, gt=0)  # requests per second
    max_retries_per_endpoint: int = Field(default=2, ge=0)
    timeout_s: float = 30.0
    always_available: bool = False
    temperature: float = 0.7
    top_p: float = 0.9
    score_map: ScoreMap = Field(default_factory=ScoreMap)


class RuleMatch(BaseModel):
    """Conjunctive predicate over a figure category; empty matches everything."""

    model_config = ConfigDict(extra="forbid")

    visual_types: Optional[list[str]] = None
    subject_areas: Optional[list[str]] = None
    min_subfigures: Optional[int] = None
    min_context_chars: Optional[int] = None
    keywords_any: Optional[list[str]] = None

    def is_catch_all(self) -> bool:
        return all(
            getattr(self, name) is None
            for name in ("visual_types", "subject_areas", "min_subfigures", "min_context_chars", "keywords_any")
        )


class RoutingRule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    match: RuleMatch = Field(default_factory=RuleMatch)
    pool: list[str]
    rationale: str = ""


class RoutingPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rules: list[RoutingRule]
    fallback_chain: list[str]
    budget: dict[str, float] = Field(default_factory=dict)


class RepetitionConfig(BaseModel):
    window_tokens: int = 8
    max_window_repeats: int = 3
    max_sentence_repeats: int = 3


class BackoffConfig(BaseModel):
    base_s: float = 1.0
    factor: float = 2.0
    jitter: float = 0.1


class SemanticTypeRule(BaseModel):
    type: str
    keywords: list[str]


class FigureClassRules(BaseModel):
    """Keyword rules shared by panel typing and figure categorization."""

    semantic_types: list[SemanticTypeRule]
    visual_types: list[str]
    semantic_to_visual: dict[str, str]


class TaxonomyConfig(BaseModel):
    labels: list[str]
    resolver_prompt: str = ""

    def canonical(self, label: str) -> Optional[str]:
        wanted = label.strip().lower()
        for known in self.labels:
            if known.lower() == wanted:
                return known
        return None


class StageToggles(BaseModel):
    ingest: bool = True
    extract: bool = True
    filter: bool = True
    recaption: bool = True


class InputConfig(BaseModel):
    metadata: str
    layouts: str
    images_root: str


class MockBackendConfig(BaseModel):
    """Serve all endpoint traffic from the bundled in-process mock server."""

    enabled: bool = False
    behaviors: dict[str, dict] = Field(default_factory=dict)


class TemplatePaths(BaseModel):
    recaption: Optional[str] = None
    fact_check: Optional[str] = None
    judge_language_fluency: Optional[str] = None
    judge_information_consistency: Optional[str] = None
    judge_key_information_accuracy: Optional[str] = None
    judge_detail_level: Optional[str] = None


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input: InputConfig
    output_dir: str
    stages: StageToggles = Field(default_factory=StageToggles)
    seed: int = 0
    workers: int = 4
    max_attempts: int = Field(default=3, ge=1)
    max_recaption_words: int = 830
    max_records_per_shard: int = 50000
    filter: FilterConfig = Field(default_factory=FilterConfig)
    repetition: RepetitionConfig = Field(default_factory=RepetitionConfig)
    backoff: BackoffConfig = Field(default_factory=BackoffConfig)
    policy_path: Optional[str] = None
    taxonomy_path: Optional[str] = None
    figure_classes_path: Optional[str] = None
    templates: TemplatePaths = Field(default_factory=TemplatePaths)
    endpoints: list[EndpointConfig] = Field(default_factory=list)
    checker_endpoint: Optional[str] = None
    resolver_endpoint: Optional[str] = None
    refusal_markers: list[str] = Field(default_factory=lambda: list(DEFAULT_REFUSAL_MARKERS))
    license_denylist: list[str] = Field(default_factory=list)
    identifier_patterns: Optional[list[str]] = None
    binding_window: int = 2
    confidence_threshold: float = 0.5
    mock_backend: MockBackendConfig = Field(default_factory=MockBackendConfig)


def _builtin(name: str) -> str:
    return resources.files("scifig.data").joinpath(name).read_text(encoding="utf-8")


def read_text_or_builtin(path: Optional[str], builtin_name: str, base_dir: Optional[Path] = None) -> str:
    if path is None:
        return _builtin(builtin_name)
    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = base_dir / p
    if not p.is_file():
        raise ConfigError(f"referenced file does not exist: {p}")
    return p.read_text(encoding="utf-8")


def validate_template(text: str, required: tuple[str, ...], label: str) -> str:
    missing = [ph for ph in required if ph not in text]
    if missing:
        raise ConfigError(f"template {label!r} is missing placeholders: {', '.join(missing)}")
    return text


def load_taxonomy(path: Optional[str], base_dir: Optional[Path] = None) -> TaxonomyConfig:
    raw = yaml.safe_load(read_text_or_builtin(path, "taxonomy.yaml", base_dir))
    try:
        taxonomy = TaxonomyConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid taxonomy config: {exc}") from exc
    if not taxonomy.labels:
        raise ConfigError("taxonomy must define at least one label")
    return taxonomy


def load_figure_classes(path: Optional[str], base_dir: Optional[Path] = None) -> FigureClassRules:
    raw = yaml.safe_load(read_text_or_builtin(path, "figure_classes.yaml", base_dir))
    try:
        rules = FigureClassRules.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid figure class rules: {exc}") from exc
    unknown = [v for v in rules.semantic_to_visual.values() if v not in rules.visual_types]
    if unknown:
        raise ConfigError(f"semantic_to_visual targets outside visual_types: {unknown}")
    return rules


def load_policy(path: Optional[str], base_dir: Optional[Path] = None) -> RoutingPolicy:
    raw = yaml.safe_load(read_text_or_builtin(path, "policy.yaml", base_dir))
    try:
        return RoutingPolicy.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid routing policy: {exc}") from exc


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    """Parse a pipeline config file. Reference resolution happens in resolve()."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid pipeline config: {exc}") from exc


class ResolvedTemplates(BaseModel):
    recaption: str
    fact_check: str
    judges: dict[str, str]


def resolve_templates(cfg: PipelineConfig, base_dir: Optional[Path] = None) -> ResolvedTemplates:
    recaption = validate_template(
        read_text_or_builtin(cfg.templates.recaption, "recaption_prompt.txt", base_dir),
        RECAPTION_PLACEHOLDERS,
        "recaption",
    )
    fact_check = validate_template(
        read_text_or_builtin(cfg.templates.fact_check, "fact_check_prompt.txt", base_dir),
        FACT_CHECK_PLACEHOLDERS,
        "fact_check",
    )
    judges = {}
    for dimension, required in JUDGE_PLACEHOLDERS.items():
        configured = getattr(cfg.templates, f"judge_{dimension}")
        judges[dimension] = validate_template(
            read_text_or_builtin(configured, f"judge_{dimension}.txt", base_dir),
            required,
            f"judge_{dimension}",
        )
    return ResolvedTemplates(recaption=recaption, fact_check=fact_check, judges=judges)


def config_digest(path: str | Path) -> str:
    """Digest of the raw config file bytes; recorded in shard manifests."""
    data = Path(path).read_bytes()
    return "sha256:" + hashlib.sha256(data).hexdigest()


_IDENTIFIER_GROUPS = ("kind", "num")


def compile_identifier_patterns(patterns: Optional[list[str]]) -> list[re.Pattern]:
    """Compile the figure-identifier pattern family, validating named groups."""
    if patterns is None:
        from .extraction import DEFAULT_IDENTIFIER_PATTERNS

        patterns = list(DEFAULT_IDENTIFIER_PATTERNS)
    compiled = []
    for source in patterns:
        try:
            rx = re.compile(source, re.IGNORECASE)
        except re.error as exc:
            raise ConfigError(f"bad identifier pattern {source!r}: {exc}") from exc
        for group in _IDENTIFIER_GROUPS:
            if group not in rx.groupindex:
                raise ConfigError(f"identifier pattern {source!r} lacks named group {group!r}")
        compiled.append(rx)
    if not compiled:
        raise ConfigError("identifier pattern family must not be empty")
    return compiled
