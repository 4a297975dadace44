"""Verifier feedback types, shared by the storyboard and verifier modules."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class FeedbackKind(str, enum.Enum):
    SEMANTIC_MISMATCH = "SemanticMismatch"
    MISSING_ENTITY = "MissingEntity"
    APPEARANCE_INCONSISTENCY = "AppearanceInconsistency"
    TEMPORAL_DISCONTINUITY = "TemporalDiscontinuity"

    @property
    def is_semantic(self) -> bool:
        return self in (FeedbackKind.SEMANTIC_MISMATCH, FeedbackKind.MISSING_ENTITY)

    @property
    def is_appearance(self) -> bool:
        return self in (FeedbackKind.APPEARANCE_INCONSISTENCY, FeedbackKind.TEMPORAL_DISCONTINUITY)


MAX_DETAIL_WORDS = 20


@dataclass(frozen=True)
class Feedback:
    kind: FeedbackKind
    detail: str
    offending_entities: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "kind", FeedbackKind(self.kind))
        object.__setattr__(self, "offending_entities", tuple(self.offending_entities))
        if not self.detail.strip():
            raise ValueError("feedback detail must be non-empty")
        words = self.detail.split()
        if len(words) > MAX_DETAIL_WORDS:
            object.__setattr__(self, "detail", " ".join(words[:MAX_DETAIL_WORDS]))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "detail": self.detail,
            "offending_entities": list(self.offending_entities),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Feedback":
        return cls(FeedbackKind(d["kind"]), d["detail"], tuple(d.get("offending_entities") or ()))
