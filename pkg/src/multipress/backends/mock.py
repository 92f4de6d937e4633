"""Deterministic scripted backend.

Three layers, all pure functions of (request content, fixtures, seed):

* **Embeddings** use a seeded token-hash scheme: each lowercase alphanumeric
  token hashes (blake2b over ``seed:dim:token``) to an RNG stream that draws a
  unit Gaussian vector; a text embeds as the L2-normalized sum of its token
  vectors. Equal strings embed identically; token overlap produces graded
  similarity; unrelated strings concentrate near cosine 0 (std ~ 1/sqrt(dim)).

* **Scripted fixtures** map (agent role, instance id, sequence) to a canned
  payload. Roles are the response schema ids; sequence is the image index,
  reasoning iteration, or refinement round.

* **Derived responses** cover requests without a fixture. The deriver parses
  the prompt's sections and counts class marker tokens: ``<topic>wire`` in the
  text cues, ``<topic>glyph`` in image object names, ``<topic>ledger`` in
  evidence and search observations, and ``<topic>undertone`` /
  ``<topic>deepundertone`` in the text cues once feedback is present (the deep
  variant needs feedback round >= 2). Image objects with confidence < 0.5 are
  ignored unless the announced gate weight vouches for the channel
  (alpha_I >= 0.2). Label scores are exp(2 * weighted count), so an empty
  signal yields a uniform distribution.

Web search scans a local corpus (the knowledge base plus the fixture file's
``search_corpus`` section) by query-token overlap.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, replace
from functools import lru_cache
from hashlib import blake2b
from math import exp
from pathlib import Path

import numpy as np

from ..errors import MalformedPayload, UnreadableImage
from ..model import NUM_TOPICS, TOPIC_NAMES, Embedding, EvidenceItem, _dt_from_str, _dt_to_str
from . import prompting
from .base import Backend, BackendConfig, ChatRequest
from .schemas import (
    FUSION_REPORT_SCHEMA,
    IMAGE_CUES_SCHEMA,
    REASONING_STEP_SCHEMA,
    TEXT_CUES_SCHEMA,
    VERIFICATION_SCHEMA,
)

logger = logging.getLogger(__name__)

FIXTURE_FORMAT_VERSION = 1

# Marker vocabulary: one token per (topic, channel).
TEXT_MARKER_SUFFIX = "wire"
IMAGE_MARKER_SUFFIX = "glyph"
KB_MARKER_SUFFIX = "ledger"
LATENT_MARKER_SUFFIX = "undertone"
DEEP_LATENT_MARKER_SUFFIX = "deepundertone"

# Channel weights applied to marker counts.
TEXT_MARKER_WEIGHT = 1.0
IMAGE_MARKER_WEIGHT = 1.0
KB_MARKER_WEIGHT = 1.5
OBSERVATION_MARKER_WEIGHT = 1.5
LATENT_MARKER_WEIGHT = 2.5

# Distribution sharpening and decision thresholds of the derived responder.
SCORE_SHARPNESS = 2.0
AMBIGUITY_GAP = 1.0
NOISY_OBJECT_CONFIDENCE = 0.5
GATE_VOUCH_THRESHOLD = 0.2

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_CAPITALIZED_RUN_RE = re.compile(r"(?:[A-Z][a-zA-Z]+)(?:\s+[A-Z][a-zA-Z]+)*")


def marker_token(topic_name: str, suffix: str) -> str:
    return f"{topic_name.lower()}{suffix}"


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@lru_cache(maxsize=262144)
def _token_vector(seed: int, dim: int, token: str) -> tuple[float, ...]:
    digest = blake2b(f"{seed}:{dim}:{token}".encode("utf-8"), digest_size=8).digest()
    gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "big")))
    vec = gen.standard_normal(dim)
    vec /= np.linalg.norm(vec)
    return tuple(float(v) for v in vec)


def embed_text(seed: int, dim: int, text: str) -> Embedding:
    """Seeded token-hash embedding; unit-norm for any non-empty content."""
    tokens = tokenize(text)
    if not tokens:
        tokens = [f"raw:{text}"]
    acc = np.zeros(dim)
    for tok in tokens:
        acc += np.asarray(_token_vector(seed, dim, tok))
    norm = np.linalg.norm(acc)
    if norm == 0.0:  # astronomically unlikely token cancellation
        acc[0] = 1.0
        norm = 1.0
    return Embedding(tuple(float(v) for v in acc / norm))


def resolve_image_ref(ref: str) -> str:
    """Map an image reference to its caption text.

    ``caption:<text>`` carries the caption inline; a readable file path is
    read as UTF-8 text. Anything else is unreadable under the mock.
    """
    if ref.startswith("caption:"):
        return ref[len("caption:"):].strip()
    path = Path(ref)
    try:
        if path.is_file():
            return path.read_text("utf-8")
    except OSError as exc:
        raise UnreadableImage(f"cannot read image ref {ref!r}: {exc}") from exc
    raise UnreadableImage(f"image ref {ref!r} is neither a caption nor a readable file")


@dataclass(frozen=True)
class MockFixtures:
    """Scripted response table plus the search-only snippet corpus."""

    responses: dict[tuple[str, str, int | None], dict]
    search_corpus: tuple[dict, ...]
    verdicts: tuple[dict, ...]

    @classmethod
    def empty(cls) -> "MockFixtures":
        return cls(responses={}, search_corpus=(), verdicts=())

    @classmethod
    def from_dict(cls, data: dict) -> "MockFixtures":
        version = data.get("version")
        if version != FIXTURE_FORMAT_VERSION:
            raise MalformedPayload(f"unsupported fixture version {version!r}")
        responses: dict[tuple[str, str, int | None], dict] = {}
        for rec in data.get("responses", ()):
            seq = rec.get("sequence")
            key = (rec["role"], rec["instance_id"], None if seq is None else int(seq))
            responses[key] = rec["payload"]
        return cls(
            responses=responses,
            search_corpus=tuple(data.get("search_corpus", ())),
            verdicts=tuple(data.get("verdicts", ())),
        )

    @classmethod
    def load(cls, path: str | Path) -> "MockFixtures":
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedPayload(f"cannot read fixture file {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "version": FIXTURE_FORMAT_VERSION,
            "responses": [
                {
                    "role": role,
                    "instance_id": instance_id,
                    **({} if seq is None else {"sequence": seq}),
                    "payload": payload,
                }
                for (role, instance_id, seq), payload in sorted(
                    self.responses.items(),
                    key=lambda kv: (kv[0][0], kv[0][1], -1 if kv[0][2] is None else kv[0][2]),
                )
            ],
            "search_corpus": list(self.search_corpus),
            "verdicts": list(self.verdicts),
        }

    def lookup(self, role: str, instance_id: str | None, sequence: int | None) -> dict | None:
        if instance_id is None:
            return None
        hit = self.responses.get((role, instance_id, sequence))
        if hit is None and sequence is not None:
            hit = self.responses.get((role, instance_id, None))
        return hit


class MockBackend(Backend):
    """Scripted, seed-deterministic provider for desk-scale runs and tests."""

    def __init__(
        self,
        config: BackendConfig,
        fixtures: MockFixtures | None = None,
        kb_items: tuple[EvidenceItem, ...] | list[EvidenceItem] = (),
    ):
        super().__init__(config)
        self.fixtures = fixtures or MockFixtures.empty()
        self._search_docs: list[tuple[EvidenceItem, frozenset[str]]] = []
        for item in kb_items:
            self._search_docs.append((item, frozenset(tokenize(item.text))))
        for rec in self.fixtures.search_corpus:
            item = EvidenceItem(
                id=rec["id"],
                text=rec["text"],
                embedding=self._embed_once(rec["text"], False),
                timestamp=_dt_from_str(rec.get("timestamp")),
                source="search",
            )
            self._search_docs.append((item, frozenset(tokenize(item.text))))

    # -- backend hooks ---------------------------------------------------------

    def _embed_once(self, content: str, is_image: bool) -> Embedding:
        if is_image:
            content = resolve_image_ref(content)
            if not content:
                content = "blank image"
        return embed_text(self.config.seed, self.config.embed_dim, content)

    def _search_once(self, query: str, limit: int) -> list[EvidenceItem]:
        q_tokens = set(tokenize(query))
        scored: list[tuple[int, str, EvidenceItem]] = []
        for item, doc_tokens in self._search_docs:
            overlap = len(q_tokens & doc_tokens)
            if overlap > 0:
                scored.append((overlap, item.id, item))
        scored.sort(key=lambda t: (-t[0], t[1]))
        return [
            replace(item, source="search", score=float(overlap))
            for overlap, _, item in scored[:limit]
        ]

    def _chat_once(self, req: ChatRequest, corrective: str | None) -> str:
        payload = self.fixtures.lookup(req.response_schema, req.instance_id, req.sequence)
        if payload is None:
            payload = self._derive(req)
        return json.dumps(payload, sort_keys=True)

    # -- derived responses -------------------------------------------------------

    def _derive(self, req: ChatRequest) -> dict:
        sections = prompting.parse_sections(req.user)
        if req.response_schema == TEXT_CUES_SCHEMA:
            return self._derive_text_cues(sections)
        if req.response_schema == IMAGE_CUES_SCHEMA:
            return self._derive_image_cues(req)
        if req.response_schema == REASONING_STEP_SCHEMA:
            return self._derive_reasoning_step(sections)
        if req.response_schema == VERIFICATION_SCHEMA:
            return self._derive_verification(sections)
        if req.response_schema == FUSION_REPORT_SCHEMA:
            return self._derive_report(sections)
        raise AssertionError(f"no deriver for schema {req.response_schema!r}")

    def _derive_text_cues(self, sections: dict[str, str]) -> dict:
        article = sections.get(prompting.ARTICLE, "")
        lines = article.splitlines()
        headline = lines[0] if lines else ""
        body = "\n".join(lines[1:])
        surfaces: list[str] = []
        seen: set[str] = set()
        for run in _CAPITALIZED_RUN_RE.findall(article):
            key = run.lower()
            if key not in seen and len(run) > 2:
                seen.add(key)
                surfaces.append(run)
        counts = Counter(t for t in tokenize(article) if len(t) >= 4)
        keywords = [tok for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:8]
        sentences = re.split(r"(?<=[.!?])\s+", body.strip())
        summary = sentences[0].strip() if sentences and sentences[0].strip() else headline
        return {
            "entities": [{"surface": s, "kind": "other"} for s in surfaces[:8]],
            "keywords": keywords,
            "summary": summary,
            "sentiment": "neu",
            "confidence": 0.85,
        }

    def _derive_image_cues(self, req: ChatRequest) -> dict:
        captions = [resolve_image_ref(ref) for ref in req.images]
        caption = " ".join(captions)
        names: list[str] = []
        for tok in tokenize(caption):
            if len(tok) >= 4 and tok not in names:
                names.append(tok)
        sentences = re.split(r"(?<=[.!?])\s+", caption.strip())
        return {
            "objects": [{"name": n, "confidence": 0.8} for n in names[:5]],
            "scene": names[0] if names else "",
            "summary": sentences[0].strip() if sentences and sentences[0].strip() else caption,
            "confidence": 0.8,
        }

    def _marker_counts(self, sections: dict[str, str]) -> list[float]:
        """Weighted marker-token counts per topic over the parsed sections."""
        counts = [0.0] * NUM_TOPICS
        text_tokens = Counter(tokenize(sections.get(prompting.TEXT_CUES, "")))
        evidence_tokens = Counter(tokenize(sections.get(prompting.EVIDENCE, "")))
        obs_tokens = Counter(tokenize(sections.get(prompting.OBSERVATIONS, "")))
        feedback_body = sections.get(prompting.FEEDBACK, "")
        feedback_round = (
            prompting.parse_feedback_round(feedback_body) if feedback_body.strip() else 0
        )
        gate = prompting.parse_gate_weights(sections.get(prompting.GATE_WEIGHTS, ""))
        alpha_image = gate[1] if gate else None

        object_lines = prompting.parse_object_lines(sections.get(prompting.IMAGE_CUES, ""))

        for idx, topic in enumerate(TOPIC_NAMES):
            counts[idx] += TEXT_MARKER_WEIGHT * text_tokens[marker_token(topic, TEXT_MARKER_SUFFIX)]
            counts[idx] += KB_MARKER_WEIGHT * evidence_tokens[marker_token(topic, KB_MARKER_SUFFIX)]
            counts[idx] += OBSERVATION_MARKER_WEIGHT * obs_tokens[
                marker_token(topic, KB_MARKER_SUFFIX)
            ]
            if feedback_round >= 1:
                counts[idx] += LATENT_MARKER_WEIGHT * text_tokens[
                    marker_token(topic, LATENT_MARKER_SUFFIX)
                ]
            if feedback_round >= 2:
                counts[idx] += LATENT_MARKER_WEIGHT * text_tokens[
                    marker_token(topic, DEEP_LATENT_MARKER_SUFFIX)
                ]
            glyph = marker_token(topic, IMAGE_MARKER_SUFFIX)
            for name, confidence in object_lines:
                trusted = confidence >= NOISY_OBJECT_CONFIDENCE or (
                    alpha_image is not None and alpha_image >= GATE_VOUCH_THRESHOLD
                )
                if trusted:
                    counts[idx] += IMAGE_MARKER_WEIGHT * tokenize(name).count(glyph)
        return counts

    @staticmethod
    def _sharpen(counts: list[float]) -> dict[str, float]:
        weights = [exp(SCORE_SHARPNESS * c) for c in counts]
        total = sum(weights)
        return {name: w / total for name, w in zip(TOPIC_NAMES, weights)}

    @staticmethod
    def _visible_evidence(sections: dict[str, str]) -> list[tuple[str, str]]:
        pairs = prompting.parse_evidence_lines(sections.get(prompting.EVIDENCE, ""))
        pairs += prompting.parse_evidence_lines(sections.get(prompting.OBSERVATIONS, ""))
        return pairs

    def _derive_reasoning_step(self, sections: dict[str, str]) -> dict:
        counts = self._marker_counts(sections)
        ordered = sorted(counts, reverse=True)
        gap = ordered[0] - ordered[1]
        top_idx = max(range(NUM_TOPICS), key=lambda i: (counts[i], -i))
        top_name = TOPIC_NAMES[top_idx]

        query = ""
        cue_body = sections.get(prompting.TEXT_CUES, "")
        for line in cue_body.splitlines():
            if line.startswith("keywords:"):
                query = " ".join(tokenize(line[len("keywords:"):]))
                break
        if not query:
            image_body = sections.get(prompting.IMAGE_CUES, "")
            names = [name for name, _ in prompting.parse_object_lines(image_body)]
            query = " ".join(names)

        if gap <= AMBIGUITY_GAP and query:
            thought = (
                f"The cues are ambiguous (top candidate {top_name}); "
                "searching for disambiguating evidence."
            )
            actions = [{"kind": "search", "query": query}]
        else:
            thought = f"The cues decisively support {top_name}; no further action needed."
            actions = [{"kind": "finalize"}]

        rationale = []
        citations: dict[str, list[str]] = {}
        for ev_id, text in self._visible_evidence(sections)[:2]:
            rationale.append(text)
            citations[text] = [ev_id]
        if not rationale:
            rationale = [f"Working hypothesis: the article concerns {top_name}."]

        return {
            "thought": thought,
            "actions": actions,
            "scores": self._sharpen(counts),
            "rationale": rationale,
            "citations": citations,
        }

    def _derive_verification(self, sections: dict[str, str]) -> dict:
        claim = sections.get(prompting.CLAIM, "")
        for rec in self.fixtures.verdicts:
            if rec.get("claim_contains", "") and rec["claim_contains"] in claim:
                return {
                    "verdict": rec.get("verdict", "unverified"),
                    "note": rec.get("note", "fixture verdict"),
                }
        return {"verdict": "unverified", "note": "No verdict scripted for this claim."}

    def _derive_report(self, sections: dict[str, str]) -> dict:
        counts = self._marker_counts(sections)
        probs = self._sharpen(counts)
        top_idx = max(range(NUM_TOPICS), key=lambda i: (counts[i], -i))
        label = TOPIC_NAMES[top_idx]

        rationale: list[str] = []
        cited: list[str] = []
        for ev_id, text in self._visible_evidence(sections)[:2]:
            rationale.append(text)
            cited.append(ev_id)
        if not rationale:
            rationale = [f"No retrieved evidence directly supports the {label} reading."]

        explanation = f"The article reads as {label}."
        for ev_id in cited:
            explanation += f" Supported by [ev:{ev_id}]."

        ordered = sorted(probs.values(), reverse=True)
        return {
            "scores": probs,
            "rationale": rationale,
            "cited": cited,
            "explanation": explanation,
            "confidence": ordered[0] - ordered[1],
        }


def write_fixture_file(path: str | Path, fixtures: MockFixtures) -> None:
    Path(path).write_text(
        json.dumps(fixtures.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        "utf-8",
    )


def search_corpus_record(
    snippet_id: str, text: str, timestamp=None
) -> dict:
    rec = {"id": snippet_id, "text": text}
    if timestamp is not None:
        rec["timestamp"] = _dt_to_str(timestamp)
    return rec
