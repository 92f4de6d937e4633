"""Backend abstraction: configuration, request/response types, retry plumbing.

A backend supplies three capabilities: structured chat completion, embedding,
and web search. Chat responses are always validated against a registered
schema before an agent sees them; on a first violation the backend re-asks
once with the validation error attached, then fails hard.
"""

from __future__ import annotations

import abc
import json
import logging
import threading
import time
from dataclasses import dataclass, field

from ..errors import ConfigError, EmptyContent, SchemaViolation
from ..model import Embedding, EvidenceItem
from . import schemas

logger = logging.getLogger(__name__)

DEFAULT_EMBED_DIM = 256


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"  # mock | http
    endpoint: str = ""
    model_name: str = "desk-mock"
    embed_dim: int = DEFAULT_EMBED_DIM
    timeout: float = 30.0
    retry: int = 2
    rate_limit_per_s: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "http"):
            raise ConfigError(f"backend kind {self.kind!r} not in ('mock', 'http')")
        if self.embed_dim < 8:
            raise ConfigError(f"embed_dim {self.embed_dim} < 8")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.retry < 0:
            raise ConfigError("retry count must be >= 0")


@dataclass(frozen=True)
class ChatRequest:
    """One structured chat call.

    ``instance_id`` and ``sequence`` are routing metadata for scripted mock
    fixtures (keyed by agent role, instance, and iteration); HTTP backends
    ignore them.
    """

    system: str
    user: str
    response_schema: str
    images: tuple[str, ...] = ()
    max_tokens: int = 1024
    instance_id: str | None = None
    sequence: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))


@dataclass(frozen=True)
class StructuredResponse:
    schema_id: str
    payload: dict
    raw: str


class TokenBucket:
    """Simple thread-safe rate limiter: ``rate`` requests per second."""

    def __init__(self, rate: float, capacity: float | None = None):
        if rate <= 0:
            raise ConfigError("rate limit must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(
                    self.capacity, self._tokens + (now - self._stamp) * self.rate
                )
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


@dataclass
class CallRecord:
    stage: str
    kind: str  # chat | embed | search
    detail: str


@dataclass
class CallLedger:
    """Per-instance accounting of external calls; drives the cost-bound check."""

    records: list[CallRecord] = field(default_factory=list)
    stage: str = "setup"

    def record(self, kind: str, detail: str) -> None:
        self.records.append(CallRecord(self.stage, kind, detail))

    def count(self, kind: str, stage: str | None = None) -> int:
        return sum(
            1
            for r in self.records
            if r.kind == kind and (stage is None or r.stage == stage)
        )


class Backend(abc.ABC):
    """Provider interface; handles schema validation and the bounded re-ask."""

    def __init__(self, config: BackendConfig):
        self.config = config
        self._bucket = (
            TokenBucket(config.rate_limit_per_s)
            if config.rate_limit_per_s is not None
            else None
        )

    # -- hooks for subclasses -------------------------------------------------

    @abc.abstractmethod
    def _chat_once(self, req: ChatRequest, corrective: str | None) -> str:
        """Return the raw response text for one attempt."""

    @abc.abstractmethod
    def _embed_once(self, content: str, is_image: bool) -> Embedding:
        """Return a unit-norm embedding of the content."""

    @abc.abstractmethod
    def _search_once(self, query: str, limit: int) -> list[EvidenceItem]:
        """Return at most ``limit`` evidence items with provenance 'search'."""

    # -- public surface --------------------------------------------------------

    def chat(self, req: ChatRequest) -> StructuredResponse:
        if not schemas.is_registered(req.response_schema):
            raise ConfigError(f"unregistered response schema {req.response_schema!r}")
        if self._bucket:
            self._bucket.acquire()
        corrective: str | None = None
        last_error = ""
        for attempt in range(2):  # one bounded re-ask on schema violation
            raw = self._chat_once(req, corrective)
            try:
                payload = json.loads(raw)
                schemas.validate_payload(req.response_schema, payload)
                return StructuredResponse(req.response_schema, payload, raw)
            except (json.JSONDecodeError, ValueError) as exc:
                last_error = str(exc)
                logger.warning(
                    "schema %s violated (attempt %d): %s",
                    req.response_schema,
                    attempt + 1,
                    last_error,
                )
                corrective = (
                    f"The previous reply was rejected: {last_error}. "
                    f"Reply with JSON matching schema {req.response_schema!r} only."
                )
        raise SchemaViolation(req.response_schema, last_error)

    def embed(self, content: str, *, is_image: bool = False) -> Embedding:
        if not content or not content.strip():
            raise EmptyContent("cannot embed empty content")
        if self._bucket:
            self._bucket.acquire()
        return self._embed_once(content, is_image)

    def web_search(self, query: str, limit: int) -> list[EvidenceItem]:
        if limit < 1:
            raise ConfigError("search limit must be >= 1")
        if self._bucket:
            self._bucket.acquire()
        results = self._search_once(query, limit)
        return results[:limit]
