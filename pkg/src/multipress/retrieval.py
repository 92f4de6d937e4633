"""Cross-modal retrieval: KB ingestion, exact-scan index, scoring, filtering.

The retrieval score is the convex combination
``beta * cos(text, item) + (1 - beta) * cos(image, item)`` over unit-norm
embeddings. A zero-flagged image embedding forces beta to 1 (text only); a
zero-flagged text embedding forces beta to 0. The index is an exhaustive
exact scan: desk-scale KBs make approximate search unnecessary and exactness
lets a brute-force sort serve as the test oracle.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import Backend
from .errors import ConfigError, DimensionMismatch, DuplicateId, TooManyMalformed
from .model import Embedding, EvidenceItem, _dt_from_str

logger = logging.getLogger(__name__)

DEFAULT_BETA = 0.5
DEFAULT_TOP_K = 5
DEFAULT_THETA_MIN = 0.15
MALFORMED_TOLERANCE = 0.01


@dataclass(frozen=True)
class RetrievalConfig:
    beta: float = DEFAULT_BETA
    top_k: int = DEFAULT_TOP_K
    theta_min: float = DEFAULT_THETA_MIN
    recency_half_life: float | None = None  # seconds

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta {self.beta} outside [0, 1]")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if not -1.0 <= self.theta_min <= 1.0:
            raise ConfigError(f"theta_min {self.theta_min} outside [-1, 1]")
        if self.recency_half_life is not None and self.recency_half_life <= 0:
            raise ConfigError("recency_half_life must be positive")


class KnowledgeBase:
    """Immutable exact-scan index; insertion order is preserved."""

    def __init__(self, items: tuple[EvidenceItem, ...], dim: int):
        self.items = items
        self.dim = dim
        self._rows = [np.asarray(item.embedding.values, dtype=float) for item in items]

    def __len__(self) -> int:
        return len(self.items)

    def ids(self) -> tuple[str, ...]:
        return tuple(item.id for item in self.items)


def build_index(items) -> KnowledgeBase:
    items = tuple(items)
    if not items:
        return KnowledgeBase(items=(), dim=0)
    dim = items[0].embedding.dim
    seen: set[str] = set()
    for item in items:
        if item.embedding.dim != dim:
            raise DimensionMismatch(
                f"item {item.id!r} has dim {item.embedding.dim}, expected {dim}"
            )
        if item.id in seen:
            raise DuplicateId(f"duplicate knowledge item id {item.id!r}")
        seen.add(item.id)
    return KnowledgeBase(items=items, dim=dim)


def _pair_score(qt: np.ndarray, qi: np.ndarray, row: np.ndarray, beta: float) -> float:
    t_zero = not qt.any()
    i_zero = not qi.any()
    if t_zero and i_zero:
        return 0.0
    if i_zero:  # no image channel: beta forced to 1
        return float(np.dot(qt, row))
    if t_zero:  # no text channel: beta forced to 0
        return float(np.dot(qi, row))
    return float(beta * np.dot(qt, row) + (1.0 - beta) * np.dot(qi, row))


def score_item(e_t: Embedding, e_i: Embedding, e_j: Embedding, beta: float) -> float:
    """Convex cross-modal similarity of one knowledge item; inputs unit-norm."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta {beta} outside [0, 1]")
    if not (e_t.dim == e_i.dim == e_j.dim):
        raise DimensionMismatch(
            f"dims differ: text {e_t.dim}, image {e_i.dim}, item {e_j.dim}"
        )
    return _pair_score(
        np.asarray(e_t.values, dtype=float),
        np.asarray(e_i.values, dtype=float),
        np.asarray(e_j.values, dtype=float),
        beta,
    )


def _timestamp_key(item: EvidenceItem) -> float:
    return item.timestamp.timestamp() if item.timestamp is not None else float("-inf")


def retrieve(
    kb: KnowledgeBase,
    e_t: Embedding,
    e_i: Embedding,
    cfg: RetrievalConfig,
    as_of=None,
) -> list[EvidenceItem]:
    """Top-k items by cross-modal score.

    Items below ``theta_min`` (pre-recency score) are discarded; when a
    recency half-life is set, surviving scores are re-weighted by
    ``2 ** (-age / half_life)`` with ``as_of`` defaulting to the newest KB
    timestamp (undated items decay by factor 1). Ties break by newer
    timestamp, then lexical id. Returned items carry their final scores in
    descending order.
    """
    if len(kb) == 0:
        return []
    if e_t.dim != kb.dim or e_i.dim != kb.dim:
        raise DimensionMismatch(
            f"query dims ({e_t.dim}, {e_i.dim}) do not match KB dim {kb.dim}"
        )
    qt = np.asarray(e_t.values, dtype=float)
    qi = np.asarray(e_i.values, dtype=float)

    reference: float | None = None
    if cfg.recency_half_life is not None:
        if as_of is not None:
            reference = as_of.timestamp()
        else:
            stamped = [it.timestamp.timestamp() for it in kb.items if it.timestamp]
            reference = max(stamped) if stamped else None

    survivors: list[tuple[float, float, str, EvidenceItem]] = []
    for item, row in zip(kb.items, kb._rows):
        raw = _pair_score(qt, qi, row, cfg.beta)
        if raw < cfg.theta_min:
            continue
        final = raw
        if reference is not None and item.timestamp is not None:
            age = max(0.0, reference - item.timestamp.timestamp())
            final = raw * 2.0 ** (-age / cfg.recency_half_life)
        survivors.append((final, _timestamp_key(item), item.id, item))

    survivors.sort(key=lambda t: (-t[0], -t[1], t[2]))
    return [item.with_score(final) for final, _, _, item in survivors[: cfg.top_k]]


def kb_ingest(path: str | Path, backend: Backend) -> list[EvidenceItem]:
    """Load a line-delimited KB file and embed every record at ingest.

    Records are JSON objects ``{"id", "text", "timestamp"?, "source_tag"?}``.
    Malformed lines are logged with their line numbers and skipped; the run
    aborts if more than 1% of non-blank lines are malformed.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"KB file not found: {path}")
    items: list[EvidenceItem] = []
    bad_lines: list[int] = []
    total = 0
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        total += 1
        try:
            rec = json.loads(line)
            snippet_id = rec["id"]
            text = rec["text"]
            if not isinstance(snippet_id, str) or not isinstance(text, str) or not text.strip():
                raise ValueError("id and non-empty text are required")
            timestamp = _dt_from_str(rec.get("timestamp"))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            logger.warning("KB %s line %d malformed: %s", path.name, lineno, exc)
            bad_lines.append(lineno)
            continue
        items.append(
            EvidenceItem(
                id=snippet_id,
                text=text,
                embedding=backend.embed(text),
                timestamp=timestamp,
                source="kb",
            )
        )
    if total and len(bad_lines) / total > MALFORMED_TOLERANCE:
        raise TooManyMalformed(len(bad_lines), total, bad_lines)
    return items
