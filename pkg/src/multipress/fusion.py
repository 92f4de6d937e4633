"""Adaptive gated fusion over four channels and interpretable report generation.

Gate weights are a softmax over channel logits: a learned (4, 4d) matrix
applied to the concatenated channel vectors, a reliability heuristic mapping
per-channel confidences through the affine rule ``z = 4 * conf - 2``, or an
all-zero logit vector for the gate-off ablation. Unavailable channels get
weight exactly 0 and the rest renormalize. The fused vector is the exact
convex combination of the channel vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import exp
from pathlib import Path

import numpy as np

from .backends import Backend, ChatRequest, prompting
from .backends.schemas import FUSION_REPORT_SCHEMA
from .errors import SchemaViolation, ShapeMismatch
from .model import (
    Embedding,
    FusionReport,
    ImageCues,
    LabelDistribution,
    PipelineContext,
    TextCues,
)

logger = logging.getLogger(__name__)

GATE_LEARNED = "learned-file"
GATE_HEURISTIC = "reliability-heuristic"
GATE_FIXED = "fixed-equal"
GATE_MODES = (GATE_LEARNED, GATE_HEURISTIC, GATE_FIXED)

# Affine map from a [0, 1] channel confidence to a gate logit.
GATE_AFFINE_SCALE = 4.0
GATE_AFFINE_SHIFT = -2.0

# Mean retrieval score at or above this level counts as full retrieval confidence.
RETRIEVAL_STRONG_SCORE = 0.5

# Reasoning stop reason -> channel confidence.
STOP_QUALITY = {
    "reward_met": 1.0,
    "finalized": 0.9,
    "stabilized": 0.8,
    "budget_exhausted": 0.5,
    "pending": 0.5,
}

REPORT_SYSTEM_PROMPT = (
    "You are the fusion report agent. Combine the weighted channels into a "
    "final topic call with per-topic scores, a cited rationale, and an "
    "explanation whose citations use [ev:<id>] markers. Reply with JSON only."
)

CHANNEL_NAMES = ("text", "image", "knowledge", "reasoning")


@dataclass(frozen=True)
class ChannelVectors:
    """Dense channel inputs to the gate; unavailable channels are zero vectors."""

    t_vec: Embedding
    i_vec: Embedding
    k_vec: Embedding
    r_vec: Embedding
    availability: tuple[bool, bool, bool, bool]
    reliability: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.5)

    def __post_init__(self) -> None:
        dims = {v.dim for v in self.vectors()}
        if len(dims) != 1:
            raise ShapeMismatch(f"channel dims differ: {sorted(dims)}")
        for name, vec, avail in zip(CHANNEL_NAMES, self.vectors(), self.availability):
            if not avail and not vec.is_zero:
                raise ShapeMismatch(f"unavailable channel {name!r} must be zero")

    def vectors(self) -> tuple[Embedding, Embedding, Embedding, Embedding]:
        return (self.t_vec, self.i_vec, self.k_vec, self.r_vec)

    @property
    def dim(self) -> int:
        return self.t_vec.dim


@dataclass(frozen=True)
class GateParams:
    mode: str = GATE_HEURISTIC
    w_g: tuple[tuple[float, ...], ...] | None = None  # (4, 4d), learned mode only

    def __post_init__(self) -> None:
        if self.mode not in GATE_MODES:
            raise ValueError(f"gate mode {self.mode!r} not in {GATE_MODES}")
        if self.w_g is not None:
            rows = tuple(tuple(float(v) for v in row) for row in self.w_g)
            if len(rows) != 4 or len({len(r) for r in rows}) != 1:
                raise ShapeMismatch("gate matrix must have 4 equal-length rows")
            if any(not np.isfinite(v) for row in rows for v in row):
                raise ShapeMismatch("gate matrix entries must be finite")
            object.__setattr__(self, "w_g", rows)
        if self.mode == GATE_LEARNED and self.w_g is None:
            raise ValueError("learned-file mode needs a gate matrix")


def _softmax_masked(logits: list[float], available: tuple[bool, ...]) -> tuple[float, ...]:
    live = [z for z, a in zip(logits, available) if a]
    if not live:
        logger.warning("no channels available; gate weights are all zero")
        return tuple(0.0 for _ in logits)
    peak = max(live)
    exps = [exp(z - peak) if a else 0.0 for z, a in zip(logits, available)]
    total = sum(exps)
    return tuple(e / total for e in exps)


def gate_weights(ch: ChannelVectors, gp: GateParams) -> tuple[float, float, float, float]:
    """Softmax gate over the four channels; unavailable channels get exactly 0."""
    if gp.mode == GATE_FIXED:
        logits = [0.0, 0.0, 0.0, 0.0]
    elif gp.mode == GATE_HEURISTIC:
        logits = [
            GATE_AFFINE_SCALE * min(1.0, max(0.0, conf)) + GATE_AFFINE_SHIFT
            for conf in ch.reliability
        ]
    else:
        matrix = np.asarray(gp.w_g, dtype=float)
        concat = np.concatenate([np.asarray(v.values) for v in ch.vectors()])
        if matrix.shape[1] != concat.shape[0]:
            raise ShapeMismatch(
                f"gate matrix expects dim {matrix.shape[1]}, channels give {concat.shape[0]}"
            )
        logits = [float(z) for z in matrix @ concat]
    alpha = _softmax_masked(logits, ch.availability)
    return alpha  # type: ignore[return-value]


def fuse(ch: ChannelVectors, alpha: tuple[float, float, float, float]) -> Embedding:
    """Exact convex combination of the channel vectors."""
    if len(alpha) != 4:
        raise ShapeMismatch("alpha must have 4 entries")
    acc = np.zeros(ch.dim)
    for weight, vec in zip(alpha, ch.vectors()):
        acc += weight * np.asarray(vec.values)
    return Embedding(tuple(float(v) for v in acc))


def save_gate_matrix(path: str | Path, matrix) -> None:
    """Write a learned gate matrix: a ``rows cols`` header, then row-major floats."""
    rows = [list(map(float, row)) for row in matrix]
    lines = [f"{len(rows)} {len(rows[0])}"]
    lines += [" ".join(repr(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def load_gate_matrix(path: str | Path) -> tuple[tuple[float, ...], ...]:
    lines = [ln for ln in Path(path).read_text("utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ShapeMismatch(f"gate file {path} is empty")
    try:
        n_rows, n_cols = (int(v) for v in lines[0].split())
        rows = tuple(tuple(float(v) for v in ln.split()) for ln in lines[1 : 1 + n_rows])
    except ValueError as exc:
        raise ShapeMismatch(f"gate file {path} malformed: {exc}") from exc
    if len(rows) != n_rows or any(len(r) != n_cols for r in rows):
        raise ShapeMismatch(f"gate file {path} does not match its header")
    return rows


def retrieval_confidence(evidence) -> float:
    """Mean retrieval score scaled so RETRIEVAL_STRONG_SCORE saturates to 1."""
    scores = [item.score for item in evidence if item.score is not None]
    if not scores:
        return 0.0
    mean = sum(scores) / len(scores)
    return min(1.0, max(0.0, mean / RETRIEVAL_STRONG_SCORE))


def build_channels(ctx: PipelineContext, dim: int, backend: Backend) -> ChannelVectors:
    """Densify the pipeline context into the four gate channels."""
    t_vec = ctx.text_embedding if ctx.text_embedding is not None else Embedding.zero(dim)
    t_avail = not t_vec.is_zero

    i_vec = ctx.image_embedding if ctx.image_embedding is not None else Embedding.zero(dim)
    i_avail = not i_vec.is_zero

    if ctx.evidence:
        weights = np.asarray(
            [max(item.score or 0.0, 0.0) for item in ctx.evidence], dtype=float
        )
        if not weights.any():
            weights = np.ones(len(ctx.evidence))
        matrix = np.asarray([item.embedding.values for item in ctx.evidence], dtype=float)
        mean = weights @ matrix / weights.sum()
        norm = float(np.linalg.norm(mean))
        k_vec = (
            Embedding(tuple(float(v) for v in mean / norm)) if norm else Embedding.zero(dim)
        )
    else:
        k_vec = Embedding.zero(dim)
    k_avail = not k_vec.is_zero

    rationale = " ".join(ctx.trace.rationale_sentences()) if ctx.trace else ""
    if rationale.strip():
        r_vec = backend.embed(rationale)
    else:
        r_vec = Embedding.zero(dim)
    r_avail = not r_vec.is_zero

    reliability = (
        ctx.text_cues.confidence if ctx.text_cues else 0.0,
        ctx.image_cues.confidence if ctx.image_cues else 0.0,
        retrieval_confidence(ctx.evidence),
        STOP_QUALITY.get(ctx.trace.stop_reason, 0.5) if ctx.trace and ctx.trace.steps else 0.0,
    )
    return ChannelVectors(
        t_vec=t_vec,
        i_vec=i_vec,
        k_vec=k_vec,
        r_vec=r_vec,
        availability=(t_avail, i_avail, k_avail, r_avail),
        reliability=reliability,
    )


def _nearest_evidence(fused: Embedding, ctx: PipelineContext, limit: int = 3) -> list[str]:
    pool = ctx.all_evidence()
    if not pool or fused.is_zero:
        return []
    f = np.asarray(fused.values)
    scored = sorted(
        ((float(np.dot(np.asarray(it.embedding.values), f)), it.id) for it in pool),
        key=lambda t: (-t[0], t[1]),
    )
    return [ev_id for _, ev_id in scored[:limit]]


def generate_report(
    backend: Backend,
    ctx: PipelineContext,
    fused: Embedding,
    alpha: tuple[float, float, float, float],
    round_index: int = 1,
) -> tuple[FusionReport, tuple[str, ...]]:
    """Produce the interpretable report; returns (report, rationale sentences).

    The chat response must cite only known evidence ids and every ``[ev:...]``
    marker in the explanation must appear in the cited list; one corrective
    re-ask is allowed, after which the call fails with SchemaViolation.
    """
    sections = [
        (prompting.ARTICLE, f"{ctx.instance.headline}\n{ctx.instance.body}"),
    ]
    if ctx.text_cues is not None:
        sections.append((prompting.TEXT_CUES, prompting.format_text_cues(ctx.text_cues)))
    if ctx.image_cues is not None and not ctx.image_cues.is_empty:
        sections.append((prompting.IMAGE_CUES, prompting.format_image_cues(ctx.image_cues)))
    sections.append((prompting.EVIDENCE, prompting.format_evidence_lines(ctx.evidence)))
    observed = ctx.trace.observed_evidence() if ctx.trace else ()
    sections.append((prompting.OBSERVATIONS, prompting.format_evidence_lines(observed)))
    sections.append((prompting.GATE_WEIGHTS, prompting.format_gate_weights(alpha)))
    if ctx.feedback is not None:
        sections.append((prompting.FEEDBACK, prompting.format_feedback(ctx.feedback)))
    nearest = _nearest_evidence(fused, ctx)
    task = "Produce the final fusion report."
    if nearest:
        task += f" Fused representation is nearest to evidence: {', '.join(nearest)}."
    sections.append((prompting.TASK, task))
    prompt = prompting.compose(sections)

    known_ids = ctx.known_evidence_ids()
    detail = ""
    for attempt in range(2):
        response = backend.chat(
            ChatRequest(
                system=REPORT_SYSTEM_PROMPT,
                user=prompt,
                response_schema=FUSION_REPORT_SCHEMA,
                instance_id=ctx.instance.id,
                sequence=round_index,
            )
        )
        payload = response.payload
        cited = tuple(payload["cited"])
        dangling = [c for c in cited if c not in known_ids]
        report = FusionReport(
            predicted=LabelDistribution.from_scores(payload["scores"]).argmax(),
            distribution=LabelDistribution.from_scores(payload["scores"]),
            text_cues=ctx.text_cues or TextCues((), (), "", "neu", 0.0),
            image_cues=ctx.image_cues or ImageCues.empty(),
            cited_evidence=cited,
            explanation=payload["explanation"],
            gate_weights=alpha,
        )
        unresolved = [m for m in report.citation_markers() if m not in cited]
        if not dangling and not unresolved:
            return report, tuple(payload["rationale"])
        detail = (
            f"citations must resolve: unknown evidence {dangling}, "
            f"markers without citation {unresolved}"
        )
        logger.warning("report citation check failed (attempt %d): %s", attempt + 1, detail)
        prompt += f"\n## CORRECTION\n{detail}\n"
    raise SchemaViolation(FUSION_REPORT_SCHEMA, detail)
