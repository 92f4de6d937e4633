"""Provider abstraction: structured chat, embeddings, and web search."""

from .base import (
    Backend,
    BackendConfig,
    CallLedger,
    CallRecord,
    ChatRequest,
    StructuredResponse,
    TokenBucket,
)
from .http import API_KEY_ENV, ENDPOINT_ENV, HttpBackend
from .mock import (
    FIXTURE_FORMAT_VERSION,
    MockBackend,
    MockFixtures,
    embed_text,
    marker_token,
    resolve_image_ref,
    tokenize,
    write_fixture_file,
)
from . import prompting, schemas

__all__ = [
    "API_KEY_ENV",
    "Backend",
    "BackendConfig",
    "CallLedger",
    "CallRecord",
    "ChatRequest",
    "ENDPOINT_ENV",
    "FIXTURE_FORMAT_VERSION",
    "HttpBackend",
    "MockBackend",
    "MockFixtures",
    "StructuredResponse",
    "TokenBucket",
    "embed_text",
    "marker_token",
    "prompting",
    "resolve_image_ref",
    "schemas",
    "tokenize",
    "write_fixture_file",
]


def make_backend(config: BackendConfig, fixtures=None, kb_items=()):
    """Instantiate the backend named by ``config.kind``."""
    if config.kind == "mock":
        return MockBackend(config, fixtures=fixtures, kb_items=tuple(kb_items))
    return HttpBackend(config)
