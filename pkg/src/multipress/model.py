"""Domain types, the inter-agent message protocol, and the shared pipeline context.

Every type here is value-semantic and JSON-serializable through
:func:`serialize_context` / :func:`deserialize_context`, which use a canonical
key order so trace files diff cleanly between runs.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from .errors import BadDistribution, MalformedPayload

TOPIC_NAMES: tuple[str, ...] = (
    "Politics",
    "Economy",
    "Technology",
    "Sports",
    "Entertainment",
    "Health",
    "Environment",
    "Science",
)
NUM_TOPICS = len(TOPIC_NAMES)

CONTEXT_FORMAT_VERSION = 1

DISTRIBUTION_SUM_TOL = 1e-9

# Citation markers embedded in report explanations, e.g. "[ev:kb-politics-3]".
CITATION_RE = re.compile(r"\[ev:([^\]\s]+)\]")

SENTIMENTS = ("neg", "neu", "pos")

STOP_REASONS = ("stabilized", "reward_met", "budget_exhausted", "finalized", "pending")


@dataclass(frozen=True, order=True)
class TopicLabel:
    """One of the eight fixed topic categories, addressed by index or name."""

    index: int

    def __post_init__(self) -> None:
        if not 0 <= self.index < NUM_TOPICS:
            raise ValueError(f"label index {self.index} outside [0, {NUM_TOPICS})")

    @property
    def name(self) -> str:
        return TOPIC_NAMES[self.index]

    @classmethod
    def from_name(cls, name: str) -> "TopicLabel":
        try:
            return cls(TOPIC_NAMES.index(name))
        except ValueError:
            raise ValueError(f"unknown topic label {name!r}") from None


def all_labels() -> tuple[TopicLabel, ...]:
    return tuple(TopicLabel(i) for i in range(NUM_TOPICS))


@dataclass(frozen=True)
class LabelDistribution:
    """Probability vector over the eight topics.

    Direct construction only checks the length, so decoded wire data with a
    bad sum is representable (and later rejected by :func:`validate_message`).
    Use :meth:`from_probs` (rejects) or :meth:`from_scores` (normalizes) to
    build distributions that are guaranteed valid.
    """

    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if len(self.probs) != NUM_TOPICS:
            raise BadDistribution(
                f"distribution has {len(self.probs)} entries, expected {NUM_TOPICS}"
            )

    @classmethod
    def from_probs(cls, probs) -> "LabelDistribution":
        dist = cls(tuple(probs))
        issue = dist.validate()
        if issue:
            raise BadDistribution(issue)
        return dist

    @classmethod
    def from_scores(cls, scores) -> "LabelDistribution":
        """Normalize non-negative per-label scores into a distribution.

        ``scores`` is either a sequence in label-index order or a mapping from
        label name to score.
        """
        if isinstance(scores, dict):
            vals = [float(scores.get(name, 0.0)) for name in TOPIC_NAMES]
        else:
            vals = [float(s) for s in scores]
        if len(vals) != NUM_TOPICS:
            raise BadDistribution(f"{len(vals)} scores, expected {NUM_TOPICS}")
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise BadDistribution("scores must be finite and non-negative")
        total = sum(vals)
        if total <= 0:
            raise BadDistribution("scores sum to zero; cannot normalize")
        return cls(tuple(v / total for v in vals))

    @classmethod
    def uniform(cls) -> "LabelDistribution":
        return cls(tuple(1.0 / NUM_TOPICS for _ in range(NUM_TOPICS)))

    def validate(self) -> str | None:
        """Return a problem description, or None if the vector is a distribution."""
        if any(not math.isfinite(p) for p in self.probs):
            return "non-finite probability"
        if any(p < 0 for p in self.probs):
            return "negative probability"
        total = sum(self.probs)
        if abs(total - 1.0) > DISTRIBUTION_SUM_TOL:
            return f"probabilities sum to {total!r}, not 1"
        return None

    def argmax(self) -> TopicLabel:
        best = max(range(NUM_TOPICS), key=lambda i: (self.probs[i], -i))
        return TopicLabel(best)

    def top_two(self) -> tuple[float, float]:
        ordered = sorted(self.probs, reverse=True)
        return ordered[0], ordered[1]


def normalize_entity(surface: str) -> str:
    """Canonical entity key: lowercase, punctuation stripped, spaces -> underscores."""
    cleaned = re.sub(r"[^\w\s]", "", surface.lower())
    return "_".join(cleaned.split())


@dataclass(frozen=True)
class Entity:
    surface: str
    normalized: str
    kind: str = "other"

    @classmethod
    def of(cls, surface: str, kind: str = "other") -> "Entity":
        return cls(surface=surface, normalized=normalize_entity(surface), kind=kind)


@dataclass(frozen=True)
class TextCues:
    """Structured cues extracted from the article text."""

    entities: tuple[Entity, ...]
    keywords: tuple[str, ...]
    summary: str
    sentiment: str = "neu"
    confidence: float = 0.8

    def __post_init__(self) -> None:
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "keywords", tuple(self.keywords))
        if self.sentiment not in SENTIMENTS:
            raise ValueError(f"sentiment {self.sentiment!r} not in {SENTIMENTS}")
        seen = [e.normalized for e in self.entities]
        if len(seen) != len(set(seen)):
            raise ValueError("entities must be deduplicated by normalized form")


@dataclass(frozen=True)
class DetectedObject:
    name: str
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"object confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class ImageCues:
    """Structured cues extracted from the image channel; sorted by confidence."""

    objects: tuple[DetectedObject, ...]
    scene: str
    summary: str
    confidence: float = 0.8

    def __post_init__(self) -> None:
        ordered = tuple(
            sorted(self.objects, key=lambda o: (-o.confidence, o.name))
        )
        object.__setattr__(self, "objects", ordered)

    @classmethod
    def empty(cls) -> "ImageCues":
        """Sentinel for instances without a usable image channel."""
        return cls(objects=(), scene="", summary="", confidence=0.0)

    @property
    def is_empty(self) -> bool:
        return not self.objects and not self.scene and not self.summary


@dataclass(frozen=True)
class Embedding:
    """Fixed-dimension dense vector; unit-norm except for the zero sentinel."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @property
    def dim(self) -> int:
        return len(self.values)

    @property
    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.values)

    @classmethod
    def zero(cls, dim: int) -> "Embedding":
        return cls((0.0,) * dim)


@dataclass(frozen=True)
class EvidenceItem:
    """One knowledge snippet with its embedding, provenance, and retrieval score."""

    id: str
    text: str
    embedding: Embedding
    timestamp: datetime | None = None
    source: str = "kb"
    score: float | None = None

    def __post_init__(self) -> None:
        if self.source not in ("kb", "search"):
            raise ValueError(f"evidence source {self.source!r} not in ('kb', 'search')")

    def with_score(self, score: float) -> "EvidenceItem":
        return replace(self, score=float(score))


@dataclass(frozen=True)
class AgentMessage:
    """Structured inter-agent envelope: prediction, evidence, rationale, confidence."""

    sender: str
    prediction: LabelDistribution | None
    evidence: tuple[str, ...]
    rationale: tuple[str, ...]
    confidence: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "evidence", tuple(self.evidence))
        object.__setattr__(self, "rationale", tuple(self.rationale))


@dataclass(frozen=True)
class ReasoningAction:
    kind: str  # search | verify | finalize
    query: str = ""
    claim: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("search", "verify", "finalize"):
            raise ValueError(f"unknown action kind {self.kind!r}")


@dataclass(frozen=True)
class ReasoningStep:
    """One thought/action/observation cycle of the online reasoning loop."""

    t: int
    thought: str
    actions: tuple[ReasoningAction, ...]
    observations: tuple[EvidenceItem, ...]
    verdict: str | None
    distribution_after: LabelDistribution

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "observations", tuple(self.observations))
        if self.is_finalize and (self.observations or self.verdict):
            raise ValueError("finalize steps carry no observation")

    @property
    def is_finalize(self) -> bool:
        return any(a.kind == "finalize" for a in self.actions)


@dataclass(frozen=True)
class ReasoningTrace:
    steps: tuple[ReasoningStep, ...]
    citations: dict[str, tuple[str, ...]]  # rationale sentence -> evidence ids
    stop_reason: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(
            self,
            "citations",
            {s: tuple(ids) for s, ids in self.citations.items()},
        )
        if self.stop_reason not in STOP_REASONS:
            raise ValueError(f"unknown stop reason {self.stop_reason!r}")
        ts = [s.t for s in self.steps]
        if ts != sorted(set(ts)):
            raise ValueError("step indices must be strictly increasing")

    @classmethod
    def empty(cls, stop_reason: str = "budget_exhausted") -> "ReasoningTrace":
        return cls(steps=(), citations={}, stop_reason=stop_reason)

    def observed_evidence(self) -> tuple[EvidenceItem, ...]:
        return tuple(item for step in self.steps for item in step.observations)

    def rationale_sentences(self) -> tuple[str, ...]:
        return tuple(self.citations.keys())


@dataclass(frozen=True)
class Feedback:
    """Refinement directive produced when the reward falls below tau."""

    weakest_component: str  # cls | ground | cons
    directive: str
    round: int

    def __post_init__(self) -> None:
        if self.weakest_component not in ("cls", "ground", "cons"):
            raise ValueError(f"unknown component {self.weakest_component!r}")
        if self.round < 1:
            raise ValueError("feedback round starts at 1")


@dataclass(frozen=True)
class RewardBreakdown:
    """Reward components plus the audit trail of what matched."""

    r_cls: float
    r_ground: float
    r_cons: float
    r: float
    matched_sentences: tuple[tuple[int, str, float], ...] = ()
    matched_entities: tuple[tuple[str, str, float], ...] = ()


@dataclass(frozen=True)
class FusionReport:
    """Interpretable output: prediction, cues, cited evidence, explanation, gates."""

    predicted: TopicLabel
    distribution: LabelDistribution
    text_cues: TextCues
    image_cues: ImageCues
    cited_evidence: tuple[str, ...]
    explanation: str
    gate_weights: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "cited_evidence", tuple(self.cited_evidence))
        gw = tuple(float(w) for w in self.gate_weights)
        if len(gw) != 4:
            raise ValueError("gate_weights must have 4 entries")
        object.__setattr__(self, "gate_weights", gw)

    def citation_markers(self) -> tuple[str, ...]:
        return tuple(CITATION_RE.findall(self.explanation))


@dataclass(frozen=True)
class NewsInstance:
    """One article: text, image references, and (for evaluation) a gold label."""

    id: str
    headline: str
    body: str
    images: tuple[str, ...] = ()
    gold_label: TopicLabel | None = None
    timestamp: datetime | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        if not self.headline.strip() and not self.body.strip():
            raise ValueError(f"instance {self.id!r}: headline and body both empty")

    @property
    def text(self) -> str:
        return f"{self.headline}\n{self.body}".strip()


@dataclass
class PipelineContext:
    """Mutable per-instance state threaded through the agent stages.

    ``messages`` is append-only; stages add to it via :meth:`log` and never
    rewrite history. Evidence and the reasoning trace are empty until their
    stages run.
    """

    instance: NewsInstance
    text_cues: TextCues | None = None
    image_cues: ImageCues | None = None
    text_embedding: Embedding | None = None
    image_embedding: Embedding | None = None
    evidence: tuple[EvidenceItem, ...] = ()
    trace: ReasoningTrace | None = None
    feedback: Feedback | None = None
    messages: list[AgentMessage] = field(default_factory=list)

    def log(self, message: AgentMessage) -> None:
        self.messages.append(message)

    def known_evidence_ids(self) -> set[str]:
        ids = {item.id for item in self.evidence}
        if self.trace is not None:
            ids.update(item.id for item in self.trace.observed_evidence())
        return ids

    def all_evidence(self) -> tuple[EvidenceItem, ...]:
        observed = self.trace.observed_evidence() if self.trace else ()
        return self.evidence + observed


# -- message validation -------------------------------------------------------

@dataclass(frozen=True)
class Issue:
    code: str
    detail: str


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    issues: tuple[Issue, ...] = ()

    def codes(self) -> tuple[str, ...]:
        return tuple(i.code for i in self.issues)


def validate_message(m: AgentMessage, ctx: PipelineContext) -> ValidationResult:
    """Check an agent message against the protocol invariants.

    Issue codes: ``ConfidenceOutOfRange``, ``BadDistribution``,
    ``DanglingEvidenceRef``.
    """
    issues: list[Issue] = []
    if not (math.isfinite(m.confidence) and 0.0 <= m.confidence <= 1.0):
        issues.append(Issue("ConfidenceOutOfRange", f"confidence {m.confidence!r}"))
    if m.prediction is not None:
        problem = m.prediction.validate()
        if problem:
            issues.append(Issue("BadDistribution", problem))
    known = ctx.known_evidence_ids()
    for ref in m.evidence:
        if ref not in known:
            issues.append(Issue("DanglingEvidenceRef", f"evidence id {ref!r} unknown"))
    return ValidationResult(ok=not issues, issues=tuple(issues))


# -- canonical serialization --------------------------------------------------

def _dt_to_str(dt: datetime | None) -> str | None:
    if dt is None:
        return None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).isoformat()


def _dt_from_str(s: str | None) -> datetime | None:
    if s is None:
        return None
    return datetime.fromisoformat(s)


def _embedding_to_list(e: Embedding | None) -> list[float] | None:
    return None if e is None else list(e.values)


def _embedding_from_list(vals) -> Embedding | None:
    return None if vals is None else Embedding(tuple(vals))


def _evidence_to_dict(item: EvidenceItem) -> dict:
    return {
        "id": item.id,
        "text": item.text,
        "embedding": list(item.embedding.values),
        "timestamp": _dt_to_str(item.timestamp),
        "source": item.source,
        "score": item.score,
    }


def _evidence_from_dict(d: dict) -> EvidenceItem:
    return EvidenceItem(
        id=d["id"],
        text=d["text"],
        embedding=Embedding(tuple(d["embedding"])),
        timestamp=_dt_from_str(d.get("timestamp")),
        source=d.get("source", "kb"),
        score=d.get("score"),
    )


def _message_to_dict(m: AgentMessage) -> dict:
    return {
        "sender": m.sender,
        "prediction": None if m.prediction is None else list(m.prediction.probs),
        "evidence": list(m.evidence),
        "rationale": list(m.rationale),
        "confidence": m.confidence,
    }


def _message_from_dict(d: dict) -> AgentMessage:
    pred = d.get("prediction")
    return AgentMessage(
        sender=d["sender"],
        prediction=None if pred is None else LabelDistribution(tuple(pred)),
        evidence=tuple(d.get("evidence", ())),
        rationale=tuple(d.get("rationale", ())),
        confidence=float(d["confidence"]),
    )


def _text_cues_to_dict(c: TextCues | None) -> dict | None:
    if c is None:
        return None
    return {
        "entities": [
            {"surface": e.surface, "normalized": e.normalized, "kind": e.kind}
            for e in c.entities
        ],
        "keywords": list(c.keywords),
        "summary": c.summary,
        "sentiment": c.sentiment,
        "confidence": c.confidence,
    }


def _text_cues_from_dict(d: dict | None) -> TextCues | None:
    if d is None:
        return None
    return TextCues(
        entities=tuple(
            Entity(e["surface"], e["normalized"], e.get("kind", "other"))
            for e in d.get("entities", ())
        ),
        keywords=tuple(d.get("keywords", ())),
        summary=d.get("summary", ""),
        sentiment=d.get("sentiment", "neu"),
        confidence=float(d.get("confidence", 0.8)),
    )


def _image_cues_to_dict(c: ImageCues | None) -> dict | None:
    if c is None:
        return None
    return {
        "objects": [{"name": o.name, "confidence": o.confidence} for o in c.objects],
        "scene": c.scene,
        "summary": c.summary,
        "confidence": c.confidence,
    }


def _image_cues_from_dict(d: dict | None) -> ImageCues | None:
    if d is None:
        return None
    return ImageCues(
        objects=tuple(
            DetectedObject(o["name"], float(o["confidence"]))
            for o in d.get("objects", ())
        ),
        scene=d.get("scene", ""),
        summary=d.get("summary", ""),
        confidence=float(d.get("confidence", 0.8)),
    )


def _step_to_dict(s: ReasoningStep) -> dict:
    return {
        "t": s.t,
        "thought": s.thought,
        "actions": [
            {"kind": a.kind, "query": a.query, "claim": a.claim} for a in s.actions
        ],
        "observations": [_evidence_to_dict(o) for o in s.observations],
        "verdict": s.verdict,
        "distribution_after": list(s.distribution_after.probs),
    }


def _step_from_dict(d: dict) -> ReasoningStep:
    return ReasoningStep(
        t=int(d["t"]),
        thought=d["thought"],
        actions=tuple(
            ReasoningAction(a["kind"], a.get("query", ""), a.get("claim", ""))
            for a in d.get("actions", ())
        ),
        observations=tuple(_evidence_from_dict(o) for o in d.get("observations", ())),
        verdict=d.get("verdict"),
        distribution_after=LabelDistribution(tuple(d["distribution_after"])),
    )


def _trace_to_dict(t: ReasoningTrace | None) -> dict | None:
    if t is None:
        return None
    return {
        "steps": [_step_to_dict(s) for s in t.steps],
        "citations": {s: list(ids) for s, ids in t.citations.items()},
        "stop_reason": t.stop_reason,
    }


def _trace_from_dict(d: dict | None) -> ReasoningTrace | None:
    if d is None:
        return None
    return ReasoningTrace(
        steps=tuple(_step_from_dict(s) for s in d.get("steps", ())),
        citations={s: tuple(ids) for s, ids in d.get("citations", {}).items()},
        stop_reason=d["stop_reason"],
    )


def instance_to_dict(inst: NewsInstance) -> dict:
    return {
        "id": inst.id,
        "headline": inst.headline,
        "body": inst.body,
        "images": list(inst.images),
        "gold_label": None if inst.gold_label is None else inst.gold_label.name,
        "timestamp": _dt_to_str(inst.timestamp),
    }


def instance_from_dict(d: dict) -> NewsInstance:
    gold = d.get("gold_label")
    return NewsInstance(
        id=d["id"],
        headline=d.get("headline", ""),
        body=d.get("body", ""),
        images=tuple(d.get("images", ())),
        gold_label=None if gold is None else TopicLabel.from_name(gold),
        timestamp=_dt_from_str(d.get("timestamp")),
    )


def context_to_dict(ctx: PipelineContext) -> dict:
    return {
        "format_version": CONTEXT_FORMAT_VERSION,
        "instance": instance_to_dict(ctx.instance),
        "text_cues": _text_cues_to_dict(ctx.text_cues),
        "image_cues": _image_cues_to_dict(ctx.image_cues),
        "text_embedding": _embedding_to_list(ctx.text_embedding),
        "image_embedding": _embedding_to_list(ctx.image_embedding),
        "evidence": [_evidence_to_dict(e) for e in ctx.evidence],
        "trace": _trace_to_dict(ctx.trace),
        "feedback": None
        if ctx.feedback is None
        else {
            "weakest_component": ctx.feedback.weakest_component,
            "directive": ctx.feedback.directive,
            "round": ctx.feedback.round,
        },
        "messages": [_message_to_dict(m) for m in ctx.messages],
    }


def context_from_dict(d: dict) -> PipelineContext:
    fb = d.get("feedback")
    return PipelineContext(
        instance=instance_from_dict(d["instance"]),
        text_cues=_text_cues_from_dict(d.get("text_cues")),
        image_cues=_image_cues_from_dict(d.get("image_cues")),
        text_embedding=_embedding_from_list(d.get("text_embedding")),
        image_embedding=_embedding_from_list(d.get("image_embedding")),
        evidence=tuple(_evidence_from_dict(e) for e in d.get("evidence", ())),
        trace=_trace_from_dict(d.get("trace")),
        feedback=None
        if fb is None
        else Feedback(fb["weakest_component"], fb["directive"], int(fb["round"])),
        messages=[_message_from_dict(m) for m in d.get("messages", ())],
    )


def serialize_context(ctx: PipelineContext) -> bytes:
    """Canonical UTF-8 JSON bytes with stable key order."""
    payload = json.dumps(
        context_to_dict(ctx), sort_keys=True, indent=2, ensure_ascii=False
    )
    return payload.encode("utf-8")


def deserialize_context(data: bytes) -> PipelineContext:
    try:
        decoded = json.loads(data.decode("utf-8"))
        version = decoded.get("format_version")
        if version != CONTEXT_FORMAT_VERSION:
            raise MalformedPayload(f"unsupported context format version {version!r}")
        return context_from_dict(decoded)
    except MalformedPayload:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedPayload(f"cannot decode pipeline context: {exc}") from exc
