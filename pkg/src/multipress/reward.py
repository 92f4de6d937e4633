"""Reward components, the weighted total, and refinement feedback.

``r = l1 * r_cls + l2 * r_ground + l3 * r_cons`` with defaults
(0.5, 0.3, 0.2). The classification term is the probability margin between
the top two topics; grounding is the fraction of rationale sentences whose
best cosine against the evidence clears ``theta_ground``; consistency is a
greedy bipartite agreement between text entities and image objects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backends import Backend
from .errors import BadWeights
from .model import (
    Entity,
    EvidenceItem,
    Feedback,
    ImageCues,
    LabelDistribution,
    PipelineContext,
    ReasoningTrace,
    RewardBreakdown,
    TextCues,
    normalize_entity,
)

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.5, 0.3, 0.2)
DEFAULT_THETA_GROUND = 0.6
DEFAULT_THETA_CONS = 0.7
DEFAULT_TAU = 0.85

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class RewardWeights:
    lambda1: float = DEFAULT_LAMBDAS[0]
    lambda2: float = DEFAULT_LAMBDAS[1]
    lambda3: float = DEFAULT_LAMBDAS[2]

    def __post_init__(self) -> None:
        vals = (self.lambda1, self.lambda2, self.lambda3)
        if any(v < 0 for v in vals):
            raise BadWeights(f"negative reward weight in {vals}")
        if abs(sum(vals) - 1.0) > WEIGHT_SUM_TOL:
            raise BadWeights(f"reward weights {vals} sum to {sum(vals)!r}, not 1")


def reward_cls(dist: LabelDistribution) -> float:
    """Margin between the two largest class probabilities."""
    top, second = dist.top_two()
    return top - second


def reward_ground(
    backend: Backend,
    rationale: tuple[str, ...] | list[str],
    evidence: tuple[EvidenceItem, ...] | list[EvidenceItem],
    theta_ground: float = DEFAULT_THETA_GROUND,
) -> tuple[float, tuple[tuple[int, str, float], ...]]:
    """Fraction of rationale sentences matched to evidence, plus the matches.

    A sentence matches when its best cosine against any evidence embedding is
    at least ``theta_ground``; ties on similarity pick the lexically smallest
    evidence id, so the audit trail is stable under evidence reordering.
    """
    sentences = [s for s in rationale]
    if not sentences:
        logger.warning("reward_ground: empty rationale scores 0.0")
        return 0.0, ()
    if not evidence:
        return 0.0, ()
    matrix = np.asarray([item.embedding.values for item in evidence], dtype=float)
    ids = [item.id for item in evidence]
    matched: list[tuple[int, str, float]] = []
    for idx, sentence in enumerate(sentences):
        emb = np.asarray(backend.embed(sentence).values)
        sims = matrix @ emb
        best = float(np.max(sims))
        if best >= theta_ground:
            best_id = min(ids[j] for j in range(len(ids)) if sims[j] == best)
            matched.append((idx, best_id, best))
    return len(matched) / len(sentences), tuple(matched)


def reward_cons(
    backend: Backend,
    entities: tuple[Entity, ...] | list[Entity],
    objects,
    theta_cons: float = DEFAULT_THETA_CONS,
) -> tuple[float, tuple[tuple[str, str, float], ...]]:
    """Agreement between text entities and image objects.

    Pairs score 1.0 on normalized-string equality, else embedding cosine of
    the normalized keys. Greedy matching over pairs sorted by similarity
    (symmetric tie-break) keeps pairs at or above ``theta_cons``; the score is
    matched pairs over the larger side. Both sides empty is vacuous agreement
    (1.0); exactly one side empty scores 0.0.
    """
    entity_keys = sorted({e.normalized for e in entities if e.normalized})
    object_keys = sorted({normalize_entity(o.name) for o in objects if normalize_entity(o.name)})
    if not entity_keys and not object_keys:
        return 1.0, ()
    if not entity_keys or not object_keys:
        return 0.0, ()

    def _embed(key: str) -> np.ndarray:
        return np.asarray(backend.embed(key).values)

    pairs: list[tuple[float, str, str]] = []
    for ent in entity_keys:
        for obj in object_keys:
            if ent == obj:
                sim = 1.0
            else:
                sim = float(np.dot(_embed(ent), _embed(obj)))
            pairs.append((sim, ent, obj))
    pairs.sort(key=lambda p: (-p[0], tuple(sorted((p[1], p[2])))))

    used_entities: set[str] = set()
    used_objects: set[str] = set()
    matched: list[tuple[str, str, float]] = []
    for sim, ent, obj in pairs:
        if sim < theta_cons:
            break
        if ent in used_entities or obj in used_objects:
            continue
        used_entities.add(ent)
        used_objects.add(obj)
        matched.append((ent, obj, sim))
    score = len(matched) / max(len(entity_keys), len(object_keys))
    return score, tuple(matched)


def total_reward(
    r_cls: float,
    r_ground: float,
    r_cons: float,
    weights: RewardWeights = RewardWeights(),
    matched_sentences: tuple[tuple[int, str, float], ...] = (),
    matched_entities: tuple[tuple[str, str, float], ...] = (),
) -> RewardBreakdown:
    """Weighted total with the component audit trail attached."""
    r = weights.lambda1 * r_cls + weights.lambda2 * r_ground + weights.lambda3 * r_cons
    return RewardBreakdown(
        r_cls=r_cls,
        r_ground=r_ground,
        r_cons=r_cons,
        r=r,
        matched_sentences=matched_sentences,
        matched_entities=matched_entities,
    )


def make_feedback(breakdown: RewardBreakdown, round_index: int) -> Feedback:
    """Refinement directive targeting the weakest component.

    Ties resolve in the documented order cls > ground > cons.
    """
    components = (
        ("cls", breakdown.r_cls),
        ("ground", breakdown.r_ground),
        ("cons", breakdown.r_cons),
    )
    weakest = min(components, key=lambda c: c[1])[0]
    if weakest == "cls":
        directive = (
            f"The margin between the top two topics is only {breakdown.r_cls:.2f}. "
            "Re-examine the strongest cues, including understated ones, and commit "
            "to the best-supported topic."
        )
    elif weakest == "ground":
        directive = (
            f"Only {len(breakdown.matched_sentences)} rationale sentences matched "
            f"retrieved evidence (grounding {breakdown.r_ground:.2f}). Quote the "
            "retrieved snippets directly and cite their ids."
        )
    else:
        directive = (
            f"Text entities and image objects agree on only "
            f"{len(breakdown.matched_entities)} pairs (consistency "
            f"{breakdown.r_cons:.2f}). Reconcile the modalities explicitly."
        )
    return Feedback(weakest_component=weakest, directive=directive, round=round_index)


def provisional_reward(
    backend: Backend,
    ctx: PipelineContext,
    trace: ReasoningTrace,
    weights: RewardWeights = RewardWeights(),
    theta_ground: float = DEFAULT_THETA_GROUND,
    theta_cons: float = DEFAULT_THETA_CONS,
) -> float:
    """Reward estimate over the current context, used as the reasoning probe.

    Uses the last step's distribution for the classification term and the
    trace rationale against all evidence seen so far for grounding; no extra
    chat call is made.
    """
    dist = trace.steps[-1].distribution_after if trace.steps else LabelDistribution.uniform()
    pool = ctx.evidence + trace.observed_evidence()
    r_g, _ = reward_ground(backend, trace.rationale_sentences(), pool, theta_ground)
    text_cues = ctx.text_cues or TextCues((), (), "stub")
    image_cues = ctx.image_cues or ImageCues.empty()
    r_c, _ = reward_cons(backend, text_cues.entities, image_cues.objects, theta_cons)
    return total_reward(reward_cls(dist), r_g, r_c, weights).r
