"""HTTP backend speaking the common chat-completions/embeddings wire shape.

Endpoint and key come from the config or the ``MULTIPRESS_ENDPOINT`` /
``MULTIPRESS_API_KEY`` environment variables. Web search POSTs to
``{endpoint}/search`` with ``{"query": ..., "limit": ...}`` and expects
``{"results": [{"id", "text", "timestamp"?}]}``; there is no standard wire
shape for live search, so this minimal contract is part of this package's
interface.
"""

from __future__ import annotations

import logging
import os

import httpx
import numpy as np

from ..errors import ConfigError, Timeout, TransportError
from ..model import Embedding, EvidenceItem, _dt_from_str
from .base import Backend, BackendConfig, ChatRequest

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "MULTIPRESS_ENDPOINT"
API_KEY_ENV = "MULTIPRESS_API_KEY"


class HttpBackend(Backend):
    def __init__(self, config: BackendConfig):
        super().__init__(config)
        endpoint = config.endpoint or os.environ.get(ENDPOINT_ENV, "")
        if not endpoint:
            raise ConfigError(
                f"http backend needs an endpoint (config or ${ENDPOINT_ENV})"
            )
        self.endpoint = endpoint.rstrip("/")
        self.api_key = os.environ.get(API_KEY_ENV, "")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._client = httpx.Client(timeout=config.timeout, headers=headers)

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.endpoint}{path}"
        last_exc: Exception | None = None
        for attempt in range(self.config.retry + 1):
            try:
                response = self._client.post(url, json=body)
                response.raise_for_status()
                return response.json()
            except httpx.TimeoutException as exc:
                last_exc = exc
                logger.warning("timeout on %s (attempt %d)", url, attempt + 1)
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last_exc = exc
                logger.warning("transport failure on %s (attempt %d): %s", url, attempt + 1, exc)
        if isinstance(last_exc, httpx.TimeoutException):
            raise Timeout(f"{url} timed out after {self.config.retry + 1} attempts") from last_exc
        raise TransportError(
            f"{url} unreachable after {self.config.retry + 1} attempts: {last_exc}"
        ) from last_exc

    def _chat_once(self, req: ChatRequest, corrective: str | None) -> str:
        user_content: list[dict] | str
        if req.images:
            user_content = [{"type": "text", "text": req.user}]
            for ref in req.images:
                user_content.append({"type": "image_url", "image_url": {"url": ref}})
        else:
            user_content = req.user
        messages = [
            {"role": "system", "content": req.system},
            {"role": "user", "content": user_content},
        ]
        if corrective:
            messages.append({"role": "user", "content": corrective})
        body = {
            "model": self.config.model_name,
            "messages": messages,
            "max_tokens": req.max_tokens,
            "temperature": 0,
            "response_format": {"type": "json_object"},
        }
        data = self._post("/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat completion payload: {exc}") from exc

    def _embed_once(self, content: str, is_image: bool) -> Embedding:
        data = self._post(
            "/embeddings", {"model": self.config.model_name, "input": content}
        )
        try:
            vec = np.asarray(data["data"][0]["embedding"], dtype=float)
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed embedding payload: {exc}") from exc
        if vec.shape != (self.config.embed_dim,):
            raise TransportError(
                f"embedding dimension {vec.shape} != configured {self.config.embed_dim}"
            )
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise TransportError("backend returned a zero embedding")
        return Embedding(tuple(float(v) for v in vec / norm))

    def _search_once(self, query: str, limit: int) -> list[EvidenceItem]:
        data = self._post("/search", {"query": query, "limit": limit})
        items = []
        for rec in data.get("results", []):
            items.append(
                EvidenceItem(
                    id=str(rec["id"]),
                    text=str(rec["text"]),
                    embedding=self.embed(str(rec["text"])),
                    timestamp=_dt_from_str(rec.get("timestamp")),
                    source="search",
                )
            )
        return items
