"""Figure categorization and policy-driven dispatch to model endpoints.

The policy is data: ordered rules mapping category predicates to endpoint
pools, plus a fallback chain walked on failure or refusal. Dispatch is the
only place that talks to endpoints; it owns retries, rate limiting, and
the attempt log that later makes decisions replayable.
"""

from __future__ import annotations

import logging
import os
import random
import re
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

import httpx

from .config import EndpointConfig, FigureClassRules, RoutingPolicy, RuleMatch
from .models import (
    Attempt,
    AttemptOutcome,
    ComplexitySignals,
    FigureCategory,
    FinalOutcome,
    RoutingDecision,
    Triplet,
)
from .protocol import COMPLETE_PATH
from .textutil import stable_seed, strip_code_fence

log = logging.getLogger(__name__)


class PolicyError(ValueError):
    """The routing policy is inconsistent with the endpoint registry."""


def validate_policy(policy: RoutingPolicy, registry: Mapping[str, EndpointConfig]) -> None:
    problems: list[str] = []
    referenced = set(policy.fallback_chain) | set(policy.budget)
    for rule in policy.rules:
        referenced.update(rule.pool)
        if not rule.pool:
            problems.append("rule with empty pool")
    for endpoint_id in sorted(referenced):
        if endpoint_id not in registry:
            problems.append(f"unknown endpoint id {endpoint_id!r}")
    if not policy.rules or not policy.rules[-1].match.is_catch_all():
        problems.append("policy needs a final catch-all default rule")
    if not policy.fallback_chain:
        problems.append("fallback_chain must be non-empty")
    else:
        last = policy.fallback_chain[-1]
        if last in registry and not registry[last].always_available:
            problems.append(f"fallback_chain must end in an always-available endpoint, not {last!r}")
    if problems:
        raise PolicyError("; ".join(problems))


def categorize_figure(
    triplet: Triplet,
    rules: FigureClassRules,
    subject_area: str = "",
) -> FigureCategory:
    """Assign a visual type from caption keywords and panel semantic types.

    Each keyword hit and each typed panel casts one vote for a visual type;
    ties break on the configured visual_types order, and zero votes means
    "mixed". Complexity signals are exact counts, computed here once.
    """
    votes: Counter[str] = Counter()
    matched: list[str] = []
    caption = triplet.raw_caption
    for rule in rules.semantic_types:
        target = rules.semantic_to_visual.get(rule.type)
        if target is None:
            continue
        for kw in rule.keywords:
            if re.search(rf"\b{re.escape(kw)}\b", caption, re.IGNORECASE):
                votes[target] += 1
                if kw not in matched:
                    matched.append(kw)
    for sub in triplet.figure.subfigures:
        target = rules.semantic_to_visual.get(sub.semantic_type)
        if target is not None:
            votes[target] += 1

    visual_type = "mixed"
    if votes:
        order = {vt: i for i, vt in enumerate(rules.visual_types)}
        visual_type = max(votes, key=lambda vt: (votes[vt], -order.get(vt, len(order))))
    return FigureCategory(
        subject_area=subject_area,
        visual_type=visual_type,
        complexity_signals=ComplexitySignals(
            subfigure_count=len(triplet.figure.subfigures),
            context_length_chars=sum(len(c) for c in triplet.contexts),
            caption_keywords_matched=matched,
        ),
    )


def rule_matches(match: RuleMatch, category: FigureCategory) -> bool:
    signals = category.complexity_signals
    if match.visual_types is not None and category.visual_type not in match.visual_types:
        return False
    if match.subject_areas is not None and category.subject_area not in match.subject_areas:
        return False
    if match.min_subfigures is not None and signals.subfigure_count < match.min_subfigures:
        return False
    if match.min_context_chars is not None and signals.context_length_chars < match.min_context_chars:
        return False
    if match.keywords_any is not None:
        if not set(match.keywords_any) & set(signals.caption_keywords_matched):
            return False
    return True


@dataclass(frozen=True)
class RouteSelection:
    endpoint_id: str
    pool: list[str]
    rule_index: int


def route(category: FigureCategory, policy: RoutingPolicy, rng_seed: int) -> RouteSelection:
    """First-match rule lookup plus weighted-random pool selection.

    Selection is deterministic for a fixed seed; weights come from the
    policy budget, defaulting to 1.0 per endpoint.
    """
    for index, rule in enumerate(policy.rules):
        if rule_matches(rule.match, category):
            weights = [policy.budget.get(e, 1.0) for e in rule.pool]
            chosen = random.Random(rng_seed).choices(rule.pool, weights=weights, k=1)[0]
            return RouteSelection(endpoint_id=chosen, pool=list(rule.pool), rule_index=index)
    raise PolicyError("no rule matched; policy is missing its catch-all default")


def planned_endpoint_sequence(selection: RouteSelection, policy: RoutingPolicy) -> list[str]:
    """Endpoint order dispatch will walk: chosen endpoint, then fallbacks, no repeats."""
    sequence = [selection.endpoint_id]
    for endpoint_id in policy.fallback_chain:
        if endpoint_id not in sequence:
            sequence.append(endpoint_id)
    return sequence


def replay_decision(
    decision: RoutingDecision, policy: RoutingPolicy, registry: Mapping[str, EndpointConfig]
) -> list[str]:
    """Reconstruct the endpoint sequence a recorded decision must have followed."""
    selection = RouteSelection(
        endpoint_id=decision.chosen_endpoint,
        pool=[],
        rule_index=decision.matched_rule_index,
    )
    expanded: list[str] = []
    for endpoint_id in planned_endpoint_sequence(selection, policy):
        tries = 1 + registry[endpoint_id].max_retries_per_endpoint
        expanded.extend([endpoint_id] * tries)
    return expanded[: len(decision.attempts)]


@dataclass
class ChatReply:
    text: str
    refused: bool = False
    score: Optional[float] = None


class TransportFailure(Exception):
    def __init__(self, kind: AttemptOutcome, detail: str = ""):
        super().__init__(detail or kind.value)
        self.kind = kind


class ChatBackend(Protocol):
    def complete(self, endpoint: EndpointConfig, payload: dict) -> ChatReply: ...


class HttpChatBackend:
    """httpx-backed transport. One client per thread; clients may be the
    in-process ASGI test client when the run uses the bundled mock server."""

    def __init__(self, client_factory: Callable[[], httpx.Client]):
        self._factory = client_factory
        self._local = threading.local()

    def _client(self) -> httpx.Client:
        client = getattr(self._local, "client", None)
        if client is None:
            client = self._factory()
            self._local.client = client
        return client

    def complete(self, endpoint: EndpointConfig, payload: dict) -> ChatReply:
        headers = {}
        if endpoint.credential_env_var:
            token = os.environ.get(endpoint.credential_env_var)
            if token:
                headers["authorization"] = f"Bearer {token}"
        url = endpoint.base_url.rstrip("/") + COMPLETE_PATH
        try:
            response = self._client().post(
                url, json=payload, headers=headers, timeout=endpoint.timeout_s
            )
        except httpx.TimeoutException as exc:
            raise TransportFailure(AttemptOutcome.timeout, str(exc)) from exc
        except httpx.HTTPError as exc:
            raise TransportFailure(AttemptOutcome.http_error, str(exc)) from exc
        if response.status_code != 200:
            raise TransportFailure(
                AttemptOutcome.http_error, f"status {response.status_code}"
            )
        body = response.json()
        return ChatReply(
            text=body.get("text", ""),
            refused=bool(body.get("refused", False)),
            score=body.get("score"),
        )


class RateLimiter:
    """Sliding-window limiter: at most `limit` acquisitions per window.

    Clock and sleep are injectable so tests can drive mocked time. Shared
    across worker threads; the lock is released while sleeping.
    """

    def __init__(
        self,
        limit: float,
        window_s: float = 1.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.limit = limit
        self.window_s = window_s
        self._clock = clock
        self._sleep = sleep
        self._sent: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        while True:
            with self._lock:
                now = self._clock()
                while self._sent and self._sent[0] <= now - self.window_s:
                    self._sent.popleft()
                if len(self._sent) < self.limit:
                    self._sent.append(now)
                    return now
                wait = self._sent[0] + self.window_s - now
            self._sleep(max(wait, 1e-4))


def default_response_filter(reply: ChatReply, refusal_markers: Sequence[str]) -> Optional[ChatReply]:
    """Normalize a reply; None means the attempt counts as a refusal.

    Whole-payload code fences are stripped, and an empty generation is a
    refusal unless the endpoint returned a score (reranker calls have no
    text payload).
    """
    if reply.refused:
        return None
    text = strip_code_fence(reply.text)
    lowered = text.lower()
    if any(marker in lowered for marker in refusal_markers):
        return None
    if not text and reply.score is None:
        return None
    return ChatReply(text=text, refused=False, score=reply.score)


@dataclass
class DispatchResult:
    decision: RoutingDecision
    reply: Optional[ChatReply]


@dataclass
class EndpointCaller:
    """Retry loop for a single endpoint: rate limit, backoff, refusal filter.

    Limiters are shared per endpoint id across threads, so the configured
    rate holds over the whole worker pool.
    """

    backend: ChatBackend
    refusal_markers: Sequence[str] = ()
    backoff_base_s: float = 1.0
    backoff_factor: float = 2.0
    backoff_jitter: float = 0.1
    clock: Callable[[], float] = time.monotonic
    sleep: Callable[[float], None] = time.sleep
    limiters: dict[str, RateLimiter] = field(default_factory=dict)
    _limiter_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _limiter(self, endpoint: EndpointConfig) -> RateLimiter:
        with self._limiter_lock:
            limiter = self.limiters.get(endpoint.endpoint_id)
            if limiter is None:
                limiter = RateLimiter(endpoint.rate_limit, clock=self.clock, sleep=self.sleep)
                self.limiters[endpoint.endpoint_id] = limiter
            return limiter

    def run(
        self, endpoint: EndpointConfig, payload: dict, rng: random.Random
    ) -> tuple[list[Attempt], Optional[ChatReply]]:
        """Try one endpoint up to 1 + max_retries times; all attempts logged."""
        attempts: list[Attempt] = []
        tries = 1 + endpoint.max_retries_per_endpoint
        for try_index in range(tries):
            self._limiter(endpoint).acquire()
            started = self.clock()
            reply: Optional[ChatReply]
            try:
                raw = self.backend.complete(endpoint, payload)
            except TransportFailure as failure:
                outcome, reply = failure.kind, None
            else:
                reply = default_response_filter(raw, self.refusal_markers)
                outcome = AttemptOutcome.ok if reply is not None else AttemptOutcome.refusal
            latency_ms = int((self.clock() - started) * 1000)
            attempts.append(Attempt(endpoint=endpoint.endpoint_id, outcome=outcome, latency_ms=latency_ms))
            if outcome is AttemptOutcome.ok:
                return attempts, reply
            if try_index < tries - 1 and self.backoff_base_s > 0:
                delay = self.backoff_base_s * self.backoff_factor**try_index
                delay *= 1.0 + self.backoff_jitter * rng.random()
                self.sleep(delay)
        return attempts, None

    def call(self, endpoint: EndpointConfig, payload: dict, call_key: str = "") -> Optional[ChatReply]:
        rng = random.Random(stable_seed("backoff", endpoint.endpoint_id, call_key))
        _attempts, reply = self.run(endpoint, payload, rng)
        return reply


@dataclass
class Dispatcher:
    """Walks the chosen endpoint and then the fallback chain for one request."""

    registry: Mapping[str, EndpointConfig]
    policy: RoutingPolicy
    caller: EndpointCaller

    def dispatch(self, triplet_id: str, selection: RouteSelection, payload: dict) -> DispatchResult:
        attempts: list[Attempt] = []
        rng = random.Random(stable_seed("backoff", triplet_id))
        reply: Optional[ChatReply] = None
        for endpoint_id in planned_endpoint_sequence(selection, self.policy):
            endpoint_attempts, reply = self.caller.run(self.registry[endpoint_id], payload, rng)
            attempts.extend(endpoint_attempts)
            if reply is not None:
                break
        if reply is None:
            log.warning("triplet %s: all endpoints exhausted", triplet_id)
        decision = RoutingDecision(
            triplet_id=triplet_id,
            matched_rule_index=selection.rule_index,
            chosen_endpoint=selection.endpoint_id,
            attempts=attempts,
            final_outcome=FinalOutcome.ok if reply is not None else FinalOutcome.failed,
        )
        return DispatchResult(decision=decision, reply=reply)
