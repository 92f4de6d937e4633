"""Stage-1 perception: structured text and image cues plus dense embeddings.

Each modality yields a dual representation: symbolic cues for the report and
the consistency reward, and a unit-norm embedding for retrieval and fusion.
The text embedding is computed over the documented canonical string
``headline + "\\n" + summary`` so it is reproducible from the cues alone.
"""

from __future__ import annotations

import logging
import re

import numpy as np

from .backends import Backend, ChatRequest, prompting
from .backends.schemas import IMAGE_CUES_SCHEMA, TEXT_CUES_SCHEMA
from .errors import EmptyInstance
from .model import (
    DetectedObject,
    Embedding,
    Entity,
    ImageCues,
    NewsInstance,
    TextCues,
    normalize_entity,
)

logger = logging.getLogger(__name__)

_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")

TEXT_SYSTEM_PROMPT = (
    "You are the text perception agent. Extract entities, keywords, a short "
    "summary, and sentiment from the article. Reply with JSON only."
)
IMAGE_SYSTEM_PROMPT = (
    "You are the image perception agent. Describe the attached image as "
    "objects with confidences, a scene label, and a short summary. "
    "Reply with JSON only."
)


def first_sentences(text: str, n: int) -> str:
    parts = [p.strip() for p in _SENTENCE_SPLIT_RE.split(text.strip()) if p.strip()]
    return " ".join(parts[:n])


def canonical_text_embedding_input(headline: str, summary: str) -> str:
    """The exact string whose embedding is the text channel vector."""
    return f"{headline}\n{summary}".strip()


def _dedupe_entities(raw: list[dict]) -> tuple[Entity, ...]:
    out: list[Entity] = []
    seen: set[str] = set()
    for rec in raw:
        surface = str(rec["surface"])
        normalized = rec.get("normalized") or normalize_entity(surface)
        if normalized and normalized not in seen:
            seen.add(normalized)
            out.append(Entity(surface=surface, normalized=normalized, kind=rec.get("kind", "other")))
    return tuple(out)


def perceive_text(backend: Backend, instance: NewsInstance) -> tuple[TextCues, Embedding]:
    """Extract text cues and the canonical text embedding for one instance."""
    if not instance.text:
        raise EmptyInstance(f"instance {instance.id!r} has no text")
    prompt = prompting.compose(
        [
            (prompting.ARTICLE, f"{instance.headline}\n{instance.body}"),
            (prompting.TASK, "Extract structured text cues."),
        ]
    )
    response = backend.chat(
        ChatRequest(
            system=TEXT_SYSTEM_PROMPT,
            user=prompt,
            response_schema=TEXT_CUES_SCHEMA,
            instance_id=instance.id,
        )
    )
    payload = response.payload
    summary = first_sentences(str(payload["summary"]), 3)
    if not summary:
        # invariant: a summary always exists when the instance has any text
        summary = first_sentences(instance.headline, 1) or first_sentences(instance.body, 1)
    cues = TextCues(
        entities=_dedupe_entities(payload["entities"]),
        keywords=tuple(payload["keywords"]),
        summary=summary,
        sentiment=payload["sentiment"],
        confidence=float(payload["confidence"]),
    )
    embedding = backend.embed(canonical_text_embedding_input(instance.headline, cues.summary))
    return cues, embedding


def merge_image_cues(cues: list[ImageCues]) -> ImageCues:
    """Merge per-image cues; commutative and idempotent.

    Objects deduplicate by name keeping the maximum confidence; scenes and
    summaries join as sorted unique strings, the summary capped at two
    sentences; confidence is the strongest per-image confidence.
    """
    present = [c for c in cues if not c.is_empty]
    if not present:
        return ImageCues.empty()
    best: dict[str, float] = {}
    for c in present:
        for obj in c.objects:
            best[obj.name] = max(best.get(obj.name, 0.0), obj.confidence)
    scenes = sorted({c.scene for c in present if c.scene})
    summaries = sorted({c.summary for c in present if c.summary})
    return ImageCues(
        objects=tuple(DetectedObject(name, conf) for name, conf in best.items()),
        scene="; ".join(scenes),
        summary=first_sentences(" ".join(summaries), 2),
        confidence=max(c.confidence for c in present),
    )


def perceive_image(backend: Backend, instance: NewsInstance) -> tuple[ImageCues, Embedding]:
    """Extract merged image cues and the mean image embedding.

    Zero images is legal and yields the sentinel empty cues plus a
    zero-flagged embedding, which downstream forces the retrieval mix toward
    text and zeroes the image gate.
    """
    if not instance.images:
        return ImageCues.empty(), Embedding.zero(backend.config.embed_dim)
    per_image: list[ImageCues] = []
    vectors: list[np.ndarray] = []
    for seq, ref in enumerate(instance.images):
        prompt = prompting.compose(
            [(prompting.TASK, f"Describe image {seq + 1} of {len(instance.images)}.")]
        )
        response = backend.chat(
            ChatRequest(
                system=IMAGE_SYSTEM_PROMPT,
                user=prompt,
                response_schema=IMAGE_CUES_SCHEMA,
                images=(ref,),
                instance_id=instance.id,
                sequence=seq,
            )
        )
        payload = response.payload
        per_image.append(
            ImageCues(
                objects=tuple(
                    DetectedObject(str(o["name"]), float(o["confidence"]))
                    for o in payload["objects"]
                ),
                scene=str(payload["scene"]),
                summary=first_sentences(str(payload["summary"]), 2),
                confidence=float(payload["confidence"]),
            )
        )
        embedding = backend.embed(ref, is_image=True)
        vectors.append(np.asarray(embedding.values))
    merged = merge_image_cues(per_image)
    mean = np.mean(vectors, axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        combined = Embedding.zero(backend.config.embed_dim)
    else:
        combined = Embedding(tuple(float(v) for v in mean / norm))
    return merged, combined
