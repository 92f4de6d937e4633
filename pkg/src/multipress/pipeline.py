"""Orchestrator: perception, retrieval, and the interleaved reason/fuse/report/
reward loop with early break on reward, plus the batch driver.

The default control flow runs one reasoning step per outer round and breaks
as soon as the reward clears tau. ``reason_once=True`` (and the reward-loop
ablation, which caps the loop at a single pass but must not cripple
reasoning) instead runs the standalone reasoning loop to completion first and
then iterates fuse/report/reward only.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from .backends import Backend, CallLedger, ChatRequest
from .errors import BackendError, ConfigError, InstanceFailed, MultipressError
from .fusion import (
    GATE_FIXED,
    GATE_HEURISTIC,
    GATE_MODES,
    GateParams,
    build_channels,
    fuse,
    gate_weights,
    generate_report,
)
from .model import (
    AgentMessage,
    Embedding,
    FusionReport,
    ImageCues,
    NewsInstance,
    PipelineContext,
    ReasoningTrace,
    RewardBreakdown,
    TopicLabel,
)
from .perception import perceive_image, perceive_text
from .reasoning import ReasoningBudget, react_step, run_reasoning, tv_distance
from .retrieval import KnowledgeBase, RetrievalConfig, retrieve
from .reward import (
    DEFAULT_TAU,
    DEFAULT_THETA_CONS,
    DEFAULT_THETA_GROUND,
    RewardWeights,
    make_feedback,
    provisional_reward,
    reward_cls,
    reward_cons,
    reward_ground,
    total_reward,
)

logger = logging.getLogger(__name__)

MODALITIES = ("both", "text_only", "image_only")


@dataclass(frozen=True)
class PipelineConfig:
    enable_rag: bool = True
    enable_reasoning: bool = True
    enable_gating: bool = True
    enable_reward_loop: bool = True
    modality: str = "both"
    budget: ReasoningBudget = ReasoningBudget()
    retrieval: RetrievalConfig = RetrievalConfig()
    tau: float = DEFAULT_TAU
    weights: RewardWeights = RewardWeights()
    theta_ground: float = DEFAULT_THETA_GROUND
    theta_cons: float = DEFAULT_THETA_CONS
    gate_mode: str = GATE_HEURISTIC
    gate_matrix: tuple[tuple[float, ...], ...] | None = None
    reason_once: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality {self.modality!r} not in {MODALITIES}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate mode {self.gate_mode!r} not in {GATE_MODES}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau {self.tau} outside [0, 1]")

    def gate_params(self) -> GateParams:
        if not self.enable_gating:
            return GateParams(mode=GATE_FIXED)
        return GateParams(mode=self.gate_mode, w_g=self.gate_matrix)

    def round_cap(self) -> int:
        if not self.enable_reward_loop:
            return 1
        return max(1, self.budget.N)


@dataclass
class ClassificationResult:
    predicted: TopicLabel
    report: FusionReport
    reward_history: tuple[RewardBreakdown, ...]
    iterations_used: int
    trace: ReasoningTrace
    timing: dict[str, float]
    context: PipelineContext
    ledger: CallLedger


@dataclass(frozen=True)
class InstanceFailure:
    index: int
    instance_id: str
    error: str


@dataclass
class BatchResult:
    results: tuple[ClassificationResult | None, ...]
    failures: tuple[InstanceFailure, ...]

    def ok_results(self) -> list[ClassificationResult]:
        return [r for r in self.results if r is not None]

    @property
    def failure_rate(self) -> float:
        return len(self.failures) / len(self.results) if self.results else 0.0


class _LedgeredBackend:
    """Per-instance delegation wrapper that records every external call."""

    def __init__(self, inner: Backend, ledger: CallLedger):
        self._inner = inner
        self.ledger = ledger

    @property
    def config(self):
        return self._inner.config

    def chat(self, req: ChatRequest):
        self.ledger.record("chat", req.response_schema)
        return self._inner.chat(req)

    def embed(self, content: str, *, is_image: bool = False) -> Embedding:
        self.ledger.record("embed", "image" if is_image else "text")
        return self._inner.embed(content, is_image=is_image)

    def web_search(self, query: str, limit: int):
        self.ledger.record("search", query[:80])
        return self._inner.web_search(query, limit)


def _log_message(ctx: PipelineContext, sender: str, prediction, evidence, rationale, confidence):
    ctx.log(
        AgentMessage(
            sender=sender,
            prediction=prediction,
            evidence=tuple(evidence),
            rationale=tuple(rationale),
            confidence=max(0.0, min(1.0, confidence)),
        )
    )


def _perceive(backend, ctx: PipelineContext, cfg: PipelineConfig) -> None:
    dim = backend.config.embed_dim
    if cfg.modality != "image_only":
        cues, embedding = perceive_text(backend, ctx.instance)
        ctx.text_cues = cues
        ctx.text_embedding = embedding
        _log_message(
            ctx, "perception.text", None, (), (cues.summary,), cues.confidence
        )
    else:
        ctx.text_embedding = Embedding.zero(dim)
    if cfg.modality != "text_only":
        cues, embedding = perceive_image(backend, ctx.instance)
        ctx.image_cues = cues
        ctx.image_embedding = embedding
        _log_message(
            ctx,
            "perception.image",
            None,
            (),
            (cues.summary,) if cues.summary else (),
            cues.confidence,
        )
    else:
        ctx.image_cues = ImageCues.empty()
        ctx.image_embedding = Embedding.zero(dim)


def _fuse_report_reward(
    backend, ctx: PipelineContext, cfg: PipelineConfig, round_index: int, ledger: CallLedger
) -> tuple[FusionReport, RewardBreakdown]:
    ledger.stage = "fusion"
    channels = build_channels(ctx, backend.config.embed_dim, backend)
    alpha = gate_weights(channels, cfg.gate_params())
    fused = fuse(channels, alpha)
    report, rationale = generate_report(backend, ctx, fused, alpha, round_index)
    _log_message(
        ctx,
        "fusion",
        report.distribution,
        report.cited_evidence,
        rationale,
        reward_cls(report.distribution),
    )

    ledger.stage = "reward"
    r_c = reward_cls(report.distribution)
    r_g, matched_sentences = reward_ground(
        backend, rationale, ctx.all_evidence(), cfg.theta_ground
    )
    entities = ctx.text_cues.entities if ctx.text_cues else ()
    objects = ctx.image_cues.objects if ctx.image_cues else ()
    r_cons_val, matched_entities = reward_cons(backend, entities, objects, cfg.theta_cons)
    breakdown = total_reward(
        r_c, r_g, r_cons_val, cfg.weights, matched_sentences, matched_entities
    )
    _log_message(
        ctx,
        "reward",
        None,
        (),
        (f"r={breakdown.r:.4f} cls={r_c:.4f} ground={r_g:.4f} cons={r_cons_val:.4f}",),
        breakdown.r,
    )
    return report, breakdown


def classify(
    backend: Backend,
    kb: KnowledgeBase,
    instance: NewsInstance,
    cfg: PipelineConfig,
) -> ClassificationResult:
    """Run the full three-stage pipeline on one instance."""
    ledger = CallLedger()
    recording = _LedgeredBackend(backend, ledger)
    ctx = PipelineContext(instance=instance)
    timing: dict[str, float] = {}

    try:
        ledger.stage = "perception"
        start = time.perf_counter()
        _perceive(recording, ctx, cfg)
        timing["perception"] = time.perf_counter() - start

        ledger.stage = "retrieval"
        start = time.perf_counter()
        if cfg.enable_rag:
            ctx.evidence = tuple(
                retrieve(kb, ctx.text_embedding, ctx.image_embedding, cfg.retrieval)
            )
            _log_message(
                ctx,
                "retrieval",
                None,
                (item.id for item in ctx.evidence),
                (),
                min(1.0, len(ctx.evidence) / max(1, cfg.retrieval.top_k)),
            )
        timing["retrieval"] = time.perf_counter() - start

        start = time.perf_counter()
        report, history = _run_rounds(recording, ctx, cfg, ledger)
        timing["rounds"] = time.perf_counter() - start
    except BackendError as exc:
        raise InstanceFailed(instance.id, str(exc)) from exc

    assert ctx.trace is not None
    return ClassificationResult(
        predicted=report.predicted,
        report=report,
        reward_history=tuple(history),
        iterations_used=len(history),
        trace=ctx.trace,
        timing=timing,
        context=ctx,
        ledger=ledger,
    )


def _run_rounds(backend, ctx, cfg: PipelineConfig, ledger) -> tuple[FusionReport, list]:
    reasoning_active = cfg.enable_reasoning and cfg.budget.N > 0
    cap = cfg.round_cap()
    history: list[RewardBreakdown] = []
    report: FusionReport | None = None

    if cfg.reason_once or not cfg.enable_reward_loop:
        ledger.stage = "reasoning"
        if reasoning_active:
            probe = lambda c, t: provisional_reward(  # noqa: E731
                backend, c, t, cfg.weights, cfg.theta_ground, cfg.theta_cons
            )
            ctx.trace = run_reasoning(backend, ctx, cfg.budget, cfg.tau, probe)
        else:
            ctx.trace = ReasoningTrace.empty()
        _log_trace_message(ctx)
        for t in range(1, cap + 1):
            report, breakdown = _fuse_report_reward(backend, ctx, cfg, t, ledger)
            history.append(breakdown)
            if breakdown.r > cfg.tau:
                break
            if t < cap:
                ctx.feedback = make_feedback(breakdown, round_index=t)
        return report, history

    steps: list = []
    citations: dict[str, tuple[str, ...]] = {}
    stop_reason = "pending"
    for t in range(1, cap + 1):
        if reasoning_active and stop_reason == "pending":
            ledger.stage = "reasoning"
            prev_obs = steps[-1].observations if steps else ()
            try:
                step, step_citations = react_step(backend, ctx, t, prev_obs, cfg.budget)
                steps.append(step)
                citations.update(step_citations)
                if step.is_finalize:
                    stop_reason = "finalized"
                elif len(steps) >= 2 and tv_distance(
                    step.distribution_after, steps[-2].distribution_after
                ) < cfg.budget.epsilon:
                    stop_reason = "stabilized"
                elif len(steps) >= cfg.budget.N:
                    stop_reason = "budget_exhausted"
            except BackendError as exc:
                logger.warning(
                    "instance %s: reasoning aborted at round %d (%s)",
                    ctx.instance.id,
                    t,
                    exc,
                )
                stop_reason = "budget_exhausted"
            _set_trace(ctx, steps, citations, stop_reason)
            if t == 1 or stop_reason != "pending":
                _log_trace_message(ctx)
        elif ctx.trace is None:
            ctx.trace = ReasoningTrace.empty()

        report, breakdown = _fuse_report_reward(backend, ctx, cfg, t, ledger)
        history.append(breakdown)
        if breakdown.r > cfg.tau:
            break
        if t < cap:
            ctx.feedback = make_feedback(breakdown, round_index=t)

    if ctx.trace is not None and ctx.trace.stop_reason == "pending":
        _set_trace(ctx, steps, citations, "budget_exhausted")
    return report, history


def _set_trace(ctx, steps, citations, stop_reason) -> None:
    ctx.trace = ReasoningTrace(
        steps=tuple(steps), citations=dict(citations), stop_reason=stop_reason
    )


def _log_trace_message(ctx: PipelineContext) -> None:
    trace = ctx.trace
    if trace is None:
        return
    last_dist = trace.steps[-1].distribution_after if trace.steps else None
    _log_message(
        ctx,
        "reasoning",
        last_dist,
        (item.id for item in trace.observed_evidence()),
        trace.rationale_sentences(),
        1.0 if trace.stop_reason in ("finalized", "reward_met") else 0.7,
    )


def classify_batch(
    backend: Backend,
    kb: KnowledgeBase,
    instances,
    cfg: PipelineConfig,
    parallelism: int = 1,
) -> BatchResult:
    """Classify a dataset; results keep input order and failures are isolated."""
    instances = list(instances)
    results: list[ClassificationResult | None] = [None] * len(instances)
    failures: list[InstanceFailure] = []

    def _one(index: int):
        try:
            return index, classify(backend, kb, instances[index], cfg), None
        except MultipressError as exc:
            logger.warning("instance %s failed: %s", instances[index].id, exc)
            return index, None, str(exc)

    if parallelism <= 1:
        outcomes = [_one(i) for i in range(len(instances))]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(_one, range(len(instances))))

    for index, result, error in outcomes:
        if result is not None:
            results[index] = result
        else:
            failures.append(InstanceFailure(index, instances[index].id, error or ""))
    failures.sort(key=lambda f: f.index)
    return BatchResult(results=tuple(results), failures=tuple(failures))


def check_cost_bound(result: ClassificationResult, cfg: PipelineConfig) -> list[str]:
    """Verify the per-instance call ledger against the O(k + N*M) contract."""
    ledger = result.ledger
    budget = cfg.budget
    cap = cfg.round_cap()
    violations = []
    searches = ledger.count("search")
    if searches > budget.N * budget.M:
        violations.append(f"searches {searches} > N*M = {budget.N * budget.M}")
    reason_chats = sum(
        1 for r in ledger.records if r.kind == "chat" and r.detail == "reasoning_step"
    )
    if reason_chats > budget.N:
        violations.append(f"reasoning chats {reason_chats} > N = {budget.N}")
    verify_chats = sum(
        1 for r in ledger.records if r.kind == "chat" and r.detail == "verification"
    )
    if verify_chats > budget.N * budget.M:
        violations.append(f"verify chats {verify_chats} > N*M = {budget.N * budget.M}")
    report_chats = sum(
        1 for r in ledger.records if r.kind == "chat" and r.detail == "fusion_report"
    )
    if report_chats > 2 * cap:  # one citation re-ask allowed per round
        violations.append(f"report chats {report_chats} > 2*rounds = {2 * cap}")
    perception_chats = ledger.count("chat", stage="perception")
    allowed = 1 + len(result.context.instance.images)
    if perception_chats > allowed:
        violations.append(f"perception chats {perception_chats} > {allowed}")
    if len(result.context.evidence) > cfg.retrieval.top_k:
        violations.append(
            f"retrieved {len(result.context.evidence)} items > k = {cfg.retrieval.top_k}"
        )
    return violations


# Table-2 variant map, in row order.
ABLATION_VARIANTS = (
    "full",
    "no_rag",
    "no_reasoning",
    "no_gated_fusion",
    "no_reward_loop",
    "text_only",
    "image_only",
)


def ablation_config(base: PipelineConfig, variant: str) -> PipelineConfig:
    """Derive one ablation configuration from the base config."""
    if variant == "full":
        return base
    if variant == "no_rag":
        return replace(base, enable_rag=False)
    if variant == "no_reasoning":
        return replace(base, enable_reasoning=False, budget=replace(base.budget, N=0))
    if variant == "no_gated_fusion":
        return replace(base, enable_gating=False)
    if variant == "no_reward_loop":
        return replace(base, enable_reward_loop=False)
    if variant == "text_only":
        return replace(base, modality="text_only")
    if variant == "image_only":
        return replace(base, modality="image_only")
    raise ConfigError(f"unknown ablation variant {variant!r}")
