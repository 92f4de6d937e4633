"""Structured-output schemas for chat responses.

Every chat call names a registered schema; the backend validates the parsed
JSON payload against it before any agent sees the response. Validators raise
``ValueError`` with a human-readable detail string.
"""

from __future__ import annotations

import math
from typing import Callable

from ..model import SENTIMENTS, TOPIC_NAMES

TEXT_CUES_SCHEMA = "text_cues"
IMAGE_CUES_SCHEMA = "image_cues"
REASONING_STEP_SCHEMA = "reasoning_step"
VERIFICATION_SCHEMA = "verification"
FUSION_REPORT_SCHEMA = "fusion_report"

ACTION_KINDS = ("search", "verify", "finalize")
VERDICTS = ("supported", "contradicted", "unverified")


def _require(payload: dict, key: str, kind) -> object:
    if key not in payload:
        raise ValueError(f"missing field {key!r}")
    value = payload[key]
    if not isinstance(value, kind):
        raise ValueError(f"field {key!r} has type {type(value).__name__}")
    return value


def _check_confidence(payload: dict) -> None:
    conf = _require(payload, "confidence", (int, float))
    if not (math.isfinite(conf) and 0.0 <= conf <= 1.0):
        raise ValueError(f"confidence {conf!r} outside [0, 1]")


def _check_scores(payload: dict) -> None:
    scores = _require(payload, "scores", dict)
    total = 0.0
    for name, value in scores.items():
        if name not in TOPIC_NAMES:
            raise ValueError(f"unknown label {name!r} in scores")
        if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
            raise ValueError(f"score for {name!r} must be finite and non-negative")
        total += float(value)
    if total <= 0:
        raise ValueError("scores must contain at least one positive value")


def _validate_text_cues(payload: dict) -> None:
    entities = _require(payload, "entities", list)
    for e in entities:
        if not isinstance(e, dict) or "surface" not in e:
            raise ValueError("each entity needs a 'surface' field")
    keywords = _require(payload, "keywords", list)
    if not all(isinstance(k, str) for k in keywords):
        raise ValueError("keywords must be strings")
    _require(payload, "summary", str)
    sentiment = _require(payload, "sentiment", str)
    if sentiment not in SENTIMENTS:
        raise ValueError(f"sentiment {sentiment!r} not in {SENTIMENTS}")
    _check_confidence(payload)


def _validate_image_cues(payload: dict) -> None:
    objects = _require(payload, "objects", list)
    for o in objects:
        if not isinstance(o, dict) or "name" not in o or "confidence" not in o:
            raise ValueError("each object needs 'name' and 'confidence'")
        conf = o["confidence"]
        if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise ValueError(f"object confidence {conf!r} outside [0, 1]")
    _require(payload, "scene", str)
    _require(payload, "summary", str)
    _check_confidence(payload)


def _validate_reasoning_step(payload: dict) -> None:
    _require(payload, "thought", str)
    actions = _require(payload, "actions", list)
    if not actions:
        raise ValueError("a step must propose at least one action")
    for a in actions:
        if not isinstance(a, dict) or a.get("kind") not in ACTION_KINDS:
            raise ValueError(f"action kind must be one of {ACTION_KINDS}")
        if a["kind"] == "search" and not a.get("query"):
            raise ValueError("search actions need a non-empty query")
        if a["kind"] == "verify" and not a.get("claim"):
            raise ValueError("verify actions need a non-empty claim")
    _check_scores(payload)
    rationale = payload.get("rationale", [])
    if not isinstance(rationale, list) or not all(isinstance(s, str) for s in rationale):
        raise ValueError("rationale must be a list of sentences")
    citations = payload.get("citations", {})
    if not isinstance(citations, dict):
        raise ValueError("citations must map sentences to evidence id lists")
    for sentence, ids in citations.items():
        if not isinstance(sentence, str) or not isinstance(ids, list):
            raise ValueError("citations must map sentences to evidence id lists")


def _validate_verification(payload: dict) -> None:
    verdict = _require(payload, "verdict", str)
    if verdict not in VERDICTS:
        raise ValueError(f"verdict {verdict!r} not in {VERDICTS}")
    _require(payload, "note", str)


def _validate_fusion_report(payload: dict) -> None:
    _check_scores(payload)
    rationale = _require(payload, "rationale", list)
    if not all(isinstance(s, str) for s in rationale):
        raise ValueError("rationale must be a list of sentences")
    cited = _require(payload, "cited", list)
    if not all(isinstance(c, str) for c in cited):
        raise ValueError("cited must be a list of evidence ids")
    _require(payload, "explanation", str)
    _check_confidence(payload)


_REGISTRY: dict[str, Callable[[dict], None]] = {
    TEXT_CUES_SCHEMA: _validate_text_cues,
    IMAGE_CUES_SCHEMA: _validate_image_cues,
    REASONING_STEP_SCHEMA: _validate_reasoning_step,
    VERIFICATION_SCHEMA: _validate_verification,
    FUSION_REPORT_SCHEMA: _validate_fusion_report,
}


def registered_schemas() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def is_registered(schema_id: str) -> bool:
    return schema_id in _REGISTRY


def validate_payload(schema_id: str, payload: object) -> None:
    """Raise ``ValueError`` if the payload does not satisfy the schema."""
    if schema_id not in _REGISTRY:
        raise ValueError(f"schema {schema_id!r} is not registered")
    if not isinstance(payload, dict):
        raise ValueError(f"payload must be a JSON object, got {type(payload).__name__}")
    _REGISTRY[schema_id](payload)
