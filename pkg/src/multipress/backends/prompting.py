"""Prompt section layout shared by the agents and the scripted mock backend.

Agent prompts are composed of named sections so that a deterministic backend
can parse exactly what a live model would read. Section headers are lines of
the form ``## NAME``; a section runs until the next header.
"""

from __future__ import annotations

import re

ARTICLE = "ARTICLE"
TEXT_CUES = "TEXT CUES"
IMAGE_CUES = "IMAGE CUES"
EVIDENCE = "EVIDENCE"
OBSERVATIONS = "OBSERVATIONS"
GATE_WEIGHTS = "GATE WEIGHTS"
FEEDBACK = "FEEDBACK"
CLAIM = "CLAIM"
TASK = "TASK"

_HEADER_RE = re.compile(r"^## (.+)$", re.MULTILINE)
_EVIDENCE_LINE_RE = re.compile(r"^- \[([^\]\s]+)\] (.*)$")
_OBJECT_LINE_RE = re.compile(r"^- (.+) \(confidence=([0-9.]+)\)$")
_GATE_RE = re.compile(
    r"T=([0-9.eE+-]+) I=([0-9.eE+-]+) K=([0-9.eE+-]+) R=([0-9.eE+-]+)"
)
_FEEDBACK_ROUND_RE = re.compile(r"round=(\d+)")


def compose(sections: list[tuple[str, str]]) -> str:
    """Join (header, body) pairs into one prompt; empty bodies are kept so the
    reader can distinguish 'section absent' from 'section empty'."""
    parts = [f"## {header}\n{body.rstrip()}" for header, body in sections]
    return "\n\n".join(parts) + "\n"


def parse_sections(prompt: str) -> dict[str, str]:
    """Invert :func:`compose`: map section header -> body text."""
    sections: dict[str, str] = {}
    matches = list(_HEADER_RE.finditer(prompt))
    for i, m in enumerate(matches):
        start = m.end()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(prompt)
        sections[m.group(1).strip()] = prompt[start:end].strip()
    return sections


def format_evidence_lines(items) -> str:
    """One ``- [id] text`` line per evidence item."""
    return "\n".join(f"- [{item.id}] {item.text}" for item in items)


def parse_evidence_lines(body: str) -> list[tuple[str, str]]:
    out = []
    for line in body.splitlines():
        m = _EVIDENCE_LINE_RE.match(line.strip())
        if m:
            out.append((m.group(1), m.group(2)))
    return out


def format_object_lines(objects) -> str:
    return "\n".join(
        f"- {o.name} (confidence={o.confidence:.2f})" for o in objects
    )


def parse_object_lines(body: str) -> list[tuple[str, float]]:
    out = []
    for line in body.splitlines():
        m = _OBJECT_LINE_RE.match(line.strip())
        if m:
            out.append((m.group(1), float(m.group(2))))
    return out


def format_gate_weights(alpha) -> str:
    t, i, k, r = alpha
    return f"T={t:.6f} I={i:.6f} K={k:.6f} R={r:.6f}"


def parse_gate_weights(body: str) -> tuple[float, float, float, float] | None:
    m = _GATE_RE.search(body)
    if not m:
        return None
    return tuple(float(g) for g in m.groups())  # type: ignore[return-value]


def format_feedback(feedback) -> str:
    return (
        f"round={feedback.round} component={feedback.weakest_component}: "
        f"{feedback.directive}"
    )


def format_text_cues(cues) -> str:
    entities = "; ".join(e.surface for e in cues.entities)
    return (
        f"keywords: {' '.join(cues.keywords)}\n"
        f"entities: {entities}\n"
        f"summary: {cues.summary}\n"
        f"sentiment: {cues.sentiment}\n"
        f"confidence: {cues.confidence:.2f}"
    )


def format_image_cues(cues) -> str:
    objects = format_object_lines(cues.objects)
    return (
        f"{objects}\n"
        f"scene: {cues.scene}\n"
        f"summary: {cues.summary}\n"
        f"confidence: {cues.confidence:.2f}"
    ).lstrip("\n")


def parse_feedback_round(body: str) -> int:
    m = _FEEDBACK_ROUND_RE.search(body)
    return int(m.group(1)) if m else 1
