"""Exception types shared across the pipeline."""

from __future__ import annotations


class MultipressError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(MultipressError):
    """Invalid configuration value or combination."""


# -- domain model -----------------------------------------------------------

class BadDistribution(MultipressError):
    """Label distribution violates its invariants (length, sign, or sum)."""


class MalformedPayload(MultipressError):
    """Serialized context or record file cannot be decoded."""


class EmptyInstance(MultipressError):
    """News instance has neither headline nor body text."""


# -- backends ---------------------------------------------------------------

class BackendError(MultipressError):
    """Base class for backend transport and protocol failures."""


class TransportError(BackendError):
    """Request could not be delivered after the configured retries."""


class Timeout(BackendError):
    """Backend did not answer within the configured timeout."""


class SchemaViolation(BackendError):
    """Chat response failed structured-output validation after re-ask."""

    def __init__(self, schema_id: str, detail: str):
        super().__init__(f"response does not satisfy schema {schema_id!r}: {detail}")
        self.schema_id = schema_id
        self.detail = detail


class EmptyContent(BackendError):
    """embed() was called with empty content."""


class UnreadableImage(MultipressError):
    """Image reference does not resolve to readable content."""


# -- retrieval --------------------------------------------------------------

class DimensionMismatch(MultipressError):
    """Embedding dimensions disagree."""


class DuplicateId(MultipressError):
    """Two knowledge items share an id."""


class TooManyMalformed(MultipressError):
    """More than the tolerated fraction of KB lines failed to parse."""

    def __init__(self, bad: int, total: int, lines: list[int]):
        super().__init__(
            f"{bad} of {total} lines malformed (>1% tolerated); lines: {lines}"
        )
        self.bad = bad
        self.total = total
        self.lines = lines


# -- reasoning / fusion / reward -------------------------------------------

class LengthMismatch(MultipressError):
    """Two distributions have different lengths."""


class ShapeMismatch(MultipressError):
    """Vector or matrix shapes are incompatible."""


class BadWeights(MultipressError):
    """Reward weights are negative or do not sum to 1."""


# -- pipeline / data --------------------------------------------------------

class InstanceFailed(MultipressError):
    """One instance could not be classified; partial trace preserved."""

    def __init__(self, instance_id: str, reason: str):
        super().__init__(f"instance {instance_id!r} failed: {reason}")
        self.instance_id = instance_id
        self.reason = reason


class SchemaError(MultipressError):
    """Dataset record violates the schema."""

    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line
        self.detail = detail


class UnknownLabel(MultipressError):
    """Label name is not one of the eight topic categories."""


class EmptyMatrix(MultipressError):
    """Metrics requested for a confusion matrix with no observations."""
