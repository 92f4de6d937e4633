"""Metrics and the ablation/sweep experiment drivers.

Macro precision/recall/F1 average over all eight classes, including classes
absent from the gold set, with the zero-division convention of 0. That keeps
the macros defined on small splits but makes absolute numbers incomparable
with conventions that skip absent classes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

from .errors import ConfigError, EmptyMatrix, LengthMismatch
from .model import NUM_TOPICS, NewsInstance, TopicLabel
from .pipeline import (
    ABLATION_VARIANTS,
    PipelineConfig,
    ablation_config,
    classify_batch,
)

logger = logging.getLogger(__name__)

SWEEP_AXES: dict[str, tuple[int, ...]] = {
    "top_k": (1, 3, 5, 10),
    "refine_iters": (0, 1, 2, 3),
}


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: tuple[tuple[int, ...], ...]  # rows = gold, cols = predicted

    def __post_init__(self) -> None:
        if len(self.counts) != NUM_TOPICS or any(
            len(row) != NUM_TOPICS for row in self.counts
        ):
            raise ValueError(f"confusion matrix must be {NUM_TOPICS}x{NUM_TOPICS}")
        if any(c < 0 for row in self.counts for c in row):
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return sum(sum(row) for row in self.counts)


@dataclass(frozen=True)
class MetricsRow:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: tuple[tuple[float, float, float], ...]


def confusion(preds, golds) -> ConfusionMatrix:
    preds = list(preds)
    golds = list(golds)
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    counts = [[0] * NUM_TOPICS for _ in range(NUM_TOPICS)]
    for pred, gold in zip(preds, golds):
        counts[gold.index][pred.index] += 1
    return ConfusionMatrix(tuple(tuple(row) for row in counts))


def macro_metrics(cm: ConfusionMatrix) -> MetricsRow:
    """Accuracy plus macro-averaged precision/recall/F1 over all classes."""
    if cm.n == 0:
        raise EmptyMatrix("cannot compute metrics over zero observations")
    per_class: list[tuple[float, float, float]] = []
    for c in range(NUM_TOPICS):
        tp = cm.counts[c][c]
        fp = sum(cm.counts[g][c] for g in range(NUM_TOPICS)) - tp
        fn = sum(cm.counts[c]) - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append((precision, recall, f1))
    accuracy = sum(cm.counts[c][c] for c in range(NUM_TOPICS)) / cm.n
    return MetricsRow(
        accuracy=accuracy,
        macro_precision=sum(p for p, _, _ in per_class) / NUM_TOPICS,
        macro_recall=sum(r for _, r, _ in per_class) / NUM_TOPICS,
        macro_f1=sum(f for _, _, f in per_class) / NUM_TOPICS,
        per_class=tuple(per_class),
    )


@dataclass(frozen=True)
class SuiteRow:
    """One experiment condition: metrics plus per-instance predictions."""

    name: str
    metrics: MetricsRow
    predictions: tuple[str | None, ...]  # label names aligned to the dataset
    failures: int
    confusion: ConfusionMatrix


def _require_gold(dataset: list[NewsInstance]) -> None:
    missing = [inst.id for inst in dataset if inst.gold_label is None]
    if missing:
        raise ConfigError(f"{len(missing)} instances lack gold labels (e.g. {missing[:3]})")


def _evaluate_condition(
    name: str, backend, kb, dataset, cfg: PipelineConfig, parallelism: int
) -> SuiteRow:
    batch = classify_batch(backend, kb, dataset, cfg, parallelism)
    preds: list[TopicLabel] = []
    golds: list[TopicLabel] = []
    names: list[str | None] = []
    for inst, result in zip(dataset, batch.results):
        if result is None:
            names.append(None)
            continue
        names.append(result.predicted.name)
        preds.append(result.predicted)
        golds.append(inst.gold_label)
    cm = confusion(preds, golds)
    return SuiteRow(
        name=name,
        metrics=macro_metrics(cm),
        predictions=tuple(names),
        failures=len(batch.failures),
        confusion=cm,
    )


def run_ablation_suite(
    backend, kb, dataset, base_cfg: PipelineConfig, parallelism: int = 1
) -> list[SuiteRow]:
    """Run the full pipeline plus the six ablations under one seed."""
    dataset = list(dataset)
    _require_gold(dataset)
    rows = []
    for variant in ABLATION_VARIANTS:
        cfg = ablation_config(base_cfg, variant)
        rows.append(_evaluate_condition(variant, backend, kb, dataset, cfg, parallelism))
        logger.info("variant %s: acc=%.4f", variant, rows[-1].metrics.accuracy)
    return rows


def sweep(
    backend, kb, dataset, base_cfg: PipelineConfig, axis: str, parallelism: int = 1
) -> list[SuiteRow]:
    """Sweep retrieval depth or the refinement budget, one row per axis value.

    ``refine_iters`` counts rounds after the first pass, so value v runs the
    loop with cap v + 1.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis {axis!r} not in {sorted(SWEEP_AXES)}")
    dataset = list(dataset)
    _require_gold(dataset)
    rows = []
    for value in SWEEP_AXES[axis]:
        if axis == "top_k":
            cfg = replace(base_cfg, retrieval=replace(base_cfg.retrieval, top_k=value))
        else:
            cfg = replace(base_cfg, budget=replace(base_cfg.budget, N=value + 1))
        rows.append(
            _evaluate_condition(f"{axis}={value}", backend, kb, dataset, cfg, parallelism)
        )
        logger.info("%s=%s: acc=%.4f", axis, value, rows[-1].metrics.accuracy)
    return rows


def subset_accuracy(dataset, predictions, instance_ids) -> float:
    """Accuracy restricted to the given instance ids; failures count as wrong."""
    wanted = set(instance_ids)
    hits = 0
    total = 0
    for inst, pred in zip(dataset, predictions):
        if inst.id not in wanted:
            continue
        total += 1
        if pred is not None and inst.gold_label is not None and pred == inst.gold_label.name:
            hits += 1
    if total == 0:
        raise ConfigError("subset contains no instances from the dataset")
    return hits / total


def format_table(rows: list[SuiteRow]) -> str:
    """Fixed-precision aligned text table; byte-stable for a given result set."""
    name_width = max(len("condition"), max((len(r.name) for r in rows), default=0))
    header = (
        f"{'condition':<{name_width}}  {'acc':>7}  {'mp':>7}  {'mr':>7}  "
        f"{'mf1':>7}  {'fail':>4}"
    )
    lines = [header, "-" * len(header)]
    for row in rows:
        m = row.metrics
        lines.append(
            f"{row.name:<{name_width}}  {m.accuracy:>7.4f}  {m.macro_precision:>7.4f}  "
            f"{m.macro_recall:>7.4f}  {m.macro_f1:>7.4f}  {row.failures:>4d}"
        )
    return "\n".join(lines) + "\n"


def rows_to_records(rows: list[SuiteRow]) -> str:
    """Machine-readable JSONL mirror of the table."""
    out = []
    for row in rows:
        out.append(
            json.dumps(
                {
                    "condition": row.name,
                    "accuracy": row.metrics.accuracy,
                    "macro_precision": row.metrics.macro_precision,
                    "macro_recall": row.metrics.macro_recall,
                    "macro_f1": row.metrics.macro_f1,
                    "per_class": row.metrics.per_class,
                    "failures": row.failures,
                    "predictions": row.predictions,
                },
                sort_keys=True,
            )
        )
    return "\n".join(out) + "\n"


def format_confusion(cm: ConfusionMatrix, labels=None) -> str:
    from .model import TOPIC_NAMES

    labels = labels or TOPIC_NAMES
    width = max(len(name) for name in labels) + 1
    header = " " * width + "".join(f"{name[:4]:>6}" for name in labels)
    lines = [header]
    for name, row in zip(labels, cm.counts):
        lines.append(f"{name:<{width}}" + "".join(f"{c:>6d}" for c in row))
    return "\n".join(lines) + "\n"
