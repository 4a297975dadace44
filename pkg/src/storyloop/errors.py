"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class StoryloopError(Exception):
    """Base class for all engine errors."""


class BackendError(StoryloopError):
    """A backend call failed.

    ``kind`` is one of ``transport``, ``auth``, ``http_status`` or ``timeout``.
    """

    KINDS = ("transport", "auth", "http_status", "timeout")

    def __init__(self, kind: str, message: str, status: int | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown backend error kind {kind!r}")
        self.kind = kind
        self.status = status
        super().__init__(f"[{kind}] {message}")


class GenerationTimeout(BackendError):
    """Video generation did not finish within the endpoint timeout."""

    def __init__(self, message: str = "generation timed out"):
        super().__init__("timeout", message)


class PlanParseError(StoryloopError):
    """A storyboard payload failed to parse or validate.

    ``violations`` holds ``(location, rule_id, message)`` triples where
    location is a 1-based shot index or the string ``"plan"``.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(f"{loc}:{rule}: {msg}" for loc, rule, msg in self.violations)
        super().__init__(lines or "invalid plan")

    @property
    def rule_ids(self) -> list[str]:
        return [rule for _, rule, _ in self.violations]


class DuplicateEntity(StoryloopError):
    pass


class UnknownEntity(StoryloopError):
    pass


class EmbeddingError(StoryloopError):
    pass


class SnapshotParseError(StoryloopError):
    pass


class MissingAnchor(StoryloopError):
    pass


class VerdictParseError(StoryloopError):
    pass


class TemplateBindError(StoryloopError):
    pass


class JournalCorrupt(StoryloopError):
    def __init__(self, offset: int, reason: str):
        self.offset = offset
        super().__init__(f"journal corrupt at byte offset {offset}: {reason}")


class RunLocked(StoryloopError):
    pass


class PhaseError(StoryloopError):
    """A pipeline phase failed; the run directory stays resumable."""


class PlanPhaseError(PhaseError):
    pass


class ShotPhaseError(PhaseError):
    def __init__(self, shot_index: int, cause: BaseException):
        self.shot_index = shot_index
        self.cause = cause
        super().__init__(f"shot {shot_index} failed: {cause}")


class EditPhaseError(PhaseError):
    pass
