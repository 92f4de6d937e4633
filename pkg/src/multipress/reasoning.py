"""Budgeted online reasoning: thought -> action -> observation cycles.

The loop runs at most N iterations with at most M executed actions per
iteration and stops early when the predicted label distribution stabilizes
(total-variation distance below epsilon needs a predecessor, so the check
starts at t=2), when a reward probe clears tau, or when the agent finalizes.
A backend failure mid-loop degrades to the last completed step rather than
failing the instance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from .backends import Backend, ChatRequest, prompting
from .backends.schemas import REASONING_STEP_SCHEMA, VERIFICATION_SCHEMA
from .errors import BackendError, ConfigError, LengthMismatch
from .model import (
    EvidenceItem,
    LabelDistribution,
    PipelineContext,
    ReasoningAction,
    ReasoningStep,
    ReasoningTrace,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 3
DEFAULT_MAX_SEARCHES = 3
DEFAULT_STABILITY_EPSILON = 0.05

# Results fetched per executed search action; a constant factor on top of the
# O(k + N*M) action budget.
SEARCH_RESULT_LIMIT = 3

REASONING_SYSTEM_PROMPT = (
    "You are the online reasoning agent. Given the article cues and evidence, "
    "produce a thought, propose actions (search, verify, or finalize), "
    "per-topic scores, and a cited rationale. Reply with JSON only."
)
VERIFY_SYSTEM_PROMPT = (
    "You are the verification agent. Judge the claim against your knowledge "
    "and reply with JSON: verdict (supported/contradicted/unverified) and a note."
)

RewardProbe = Callable[[PipelineContext, ReasoningTrace], float]


@dataclass(frozen=True)
class ReasoningBudget:
    N: int = DEFAULT_MAX_ITERATIONS
    M: int = DEFAULT_MAX_SEARCHES
    epsilon: float = DEFAULT_STABILITY_EPSILON

    def __post_init__(self) -> None:
        if self.N < 0:
            raise ConfigError("max iterations N must be >= 0")
        if self.M < 1:
            raise ConfigError("max searches per iteration M must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon {self.epsilon} outside (0, 1)")


def tv_distance(p: LabelDistribution, q: LabelDistribution) -> float:
    """Total-variation distance: half the L1 distance between the vectors."""
    if len(p.probs) != len(q.probs):
        raise LengthMismatch(f"lengths {len(p.probs)} and {len(q.probs)} differ")
    return 0.5 * sum(abs(a - b) for a, b in zip(p.probs, q.probs))


def _context_sections(ctx: PipelineContext, prev_obs: tuple[EvidenceItem, ...]):
    sections = [
        (prompting.ARTICLE, f"{ctx.instance.headline}\n{ctx.instance.body}"),
    ]
    if ctx.text_cues is not None:
        sections.append((prompting.TEXT_CUES, prompting.format_text_cues(ctx.text_cues)))
    if ctx.image_cues is not None and not ctx.image_cues.is_empty:
        sections.append((prompting.IMAGE_CUES, prompting.format_image_cues(ctx.image_cues)))
    sections.append((prompting.EVIDENCE, prompting.format_evidence_lines(ctx.evidence)))
    sections.append((prompting.OBSERVATIONS, prompting.format_evidence_lines(prev_obs)))
    if ctx.feedback is not None:
        sections.append((prompting.FEEDBACK, prompting.format_feedback(ctx.feedback)))
    return sections


def react_step(
    backend: Backend,
    ctx: PipelineContext,
    t: int,
    prev_obs: tuple[EvidenceItem, ...],
    budget: ReasoningBudget,
) -> tuple[ReasoningStep, dict[str, tuple[str, ...]]]:
    """Run one reasoning iteration; returns the step and its citation map.

    At most ``budget.M`` proposed actions execute; the rest are rejected. A
    finalize action makes the whole step a finalize step (no observations).
    """
    sections = _context_sections(ctx, prev_obs)
    sections.append(
        (prompting.TASK, f"Reasoning iteration {t}. Decide the next action.")
    )
    response = backend.chat(
        ChatRequest(
            system=REASONING_SYSTEM_PROMPT,
            user=prompting.compose(sections),
            response_schema=REASONING_STEP_SCHEMA,
            instance_id=ctx.instance.id,
            sequence=t,
        )
    )
    payload = response.payload

    proposed = [
        ReasoningAction(a["kind"], a.get("query", ""), a.get("claim", ""))
        for a in payload["actions"]
    ]
    if any(a.kind == "finalize" for a in proposed):
        step = ReasoningStep(
            t=t,
            thought=payload["thought"],
            actions=(ReasoningAction("finalize"),),
            observations=(),
            verdict=None,
            distribution_after=LabelDistribution.from_scores(payload["scores"]),
        )
        return step, _clean_citations(payload, ctx, ())

    executed = proposed[: budget.M]
    if len(proposed) > budget.M:
        logger.warning(
            "instance %s step %d: %d actions proposed, budget allows %d",
            ctx.instance.id,
            t,
            len(proposed),
            budget.M,
        )
    observations: list[EvidenceItem] = []
    verdict: str | None = None
    for action in executed:
        if action.kind == "search":
            observations.extend(backend.web_search(action.query, SEARCH_RESULT_LIMIT))
        elif action.kind == "verify":
            verdict_resp = backend.chat(
                ChatRequest(
                    system=VERIFY_SYSTEM_PROMPT,
                    user=prompting.compose([(prompting.CLAIM, action.claim)]),
                    response_schema=VERIFICATION_SCHEMA,
                    instance_id=ctx.instance.id,
                    sequence=t,
                )
            )
            verdict = verdict_resp.payload["verdict"]

    step = ReasoningStep(
        t=t,
        thought=payload["thought"],
        actions=tuple(executed),
        observations=tuple(observations),
        verdict=verdict,
        distribution_after=LabelDistribution.from_scores(payload["scores"]),
    )
    return step, _clean_citations(payload, ctx, tuple(observations))


def _clean_citations(
    payload: dict, ctx: PipelineContext, new_obs: tuple[EvidenceItem, ...]
) -> dict[str, tuple[str, ...]]:
    """Keep only citations that resolve against known or newly observed evidence."""
    known = ctx.known_evidence_ids() | {item.id for item in new_obs}
    citations: dict[str, tuple[str, ...]] = {}
    for sentence in payload.get("rationale", []):
        ids = tuple(i for i in payload.get("citations", {}).get(sentence, []) if i in known)
        citations[sentence] = ids
    return citations


def run_reasoning(
    backend: Backend,
    ctx: PipelineContext,
    budget: ReasoningBudget,
    tau: float,
    reward_probe: RewardProbe | None = None,
) -> ReasoningTrace:
    """Run the full reasoning loop and return the trace with its stop reason."""
    steps: list[ReasoningStep] = []
    citations: dict[str, tuple[str, ...]] = {}
    stop_reason = "budget_exhausted"
    for t in range(1, budget.N + 1):
        prev_obs = steps[-1].observations if steps else ()
        try:
            step, step_citations = react_step(backend, ctx, t, prev_obs, budget)
        except BackendError as exc:
            logger.warning(
                "instance %s: reasoning aborted at t=%d (%s); keeping %d steps",
                ctx.instance.id,
                t,
                exc,
                len(steps),
            )
            stop_reason = "budget_exhausted"
            break
        steps.append(step)
        citations.update(step_citations)
        if step.is_finalize:
            stop_reason = "finalized"
            break
        if t >= 2:
            drift = tv_distance(step.distribution_after, steps[-2].distribution_after)
            if drift < budget.epsilon:
                stop_reason = "stabilized"
                break
        if reward_probe is not None:
            provisional = ReasoningTrace(tuple(steps), dict(citations), "pending")
            if reward_probe(ctx, provisional) >= tau:
                stop_reason = "reward_met"
                break
    return ReasoningTrace(steps=tuple(steps), citations=citations, stop_reason=stop_reason)
