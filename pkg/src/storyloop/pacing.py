"""Pacing-aware editing: retime accepted shots and assemble the final timeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import canonical
from .errors import TemplateBindError
from .synthesis import ShotArtifact

MIN_SHOT_S = 1.0
TEMPO_TARGETS = {"slow": 6.0, "medium": 4.0, "fast": 2.0}


@dataclass(frozen=True)
class Transition:
    kind: str = "cut"
    duration_s: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cut", "crossfade"):
            raise ValueError(f"unknown transition {self.kind!r}")
        if self.kind == "cut" and self.duration_s != 0.0:
            raise ValueError("cuts have no duration")
        if self.kind == "crossfade" and self.duration_s <= 0.0:
            raise ValueError("crossfade needs a positive duration")

    def __str__(self) -> str:
        return "cut" if self.kind == "cut" else f"crossfade({self.duration_s:g})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "duration_s": self.duration_s}

    @classmethod
    def from_dict(cls, d: dict | str) -> "Transition":
        if isinstance(d, str):
            if d == "cut":
                return cls()
            if d.startswith("crossfade(") and d.endswith(")"):
                return cls("crossfade", float(d[len("crossfade(") : -1]))
            raise ValueError(f"bad transition {d!r}")
        return cls(d["kind"], float(d.get("duration_s", 0.0)))


CUT = Transition()


@dataclass(frozen=True)
class Segment:
    """Shots ``first..last`` (inclusive, 1-based); ``last=None`` runs to the final shot."""

    first: int
    last: int | None
    tempo: str = "medium"
    target_duration_s: float | None = None

    def __post_init__(self):
        if self.tempo not in TEMPO_TARGETS:
            raise ValueError(f"unknown tempo {self.tempo!r}")

    def to_dict(self) -> dict:
        return {"first": self.first, "last": self.last, "tempo": self.tempo, "target_duration_s": self.target_duration_s}

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        return cls(int(d["first"]), d.get("last"), d.get("tempo", "medium"), d.get("target_duration_s"))


@dataclass(frozen=True)
class PacingTemplate:
    template_id: str
    segments: tuple[Segment, ...]
    transition_default: Transition = CUT
    follow_plan: bool = False

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def to_dict(self) -> dict:
        return {
            "template_id": self.template_id,
            "segments": [s.to_dict() for s in self.segments],
            "transition_default": self.transition_default.to_dict(),
            "follow_plan": self.follow_plan,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PacingTemplate":
        return cls(
            d["template_id"],
            tuple(Segment.from_dict(s) for s in d["segments"]),
            Transition.from_dict(d.get("transition_default", "cut")),
            bool(d.get("follow_plan", False)),
        )

    def bind(self, n_shots: int) -> list[Segment]:
        """Resolve each shot to its segment; segments must tile 1..n exactly."""
        owner: list[Segment | None] = [None] * n_shots
        for seg in self.segments:
            last = n_shots if seg.last is None else seg.last
            if seg.first < 1 or last < seg.first or last > n_shots:
                raise TemplateBindError(
                    f"template {self.template_id!r}: segment {seg.first}..{seg.last} outside 1..{n_shots}"
                )
            for i in range(seg.first, last + 1):
                if owner[i - 1] is not None:
                    raise TemplateBindError(f"template {self.template_id!r}: shot {i} covered twice")
                owner[i - 1] = seg
        missing = [i + 1 for i, s in enumerate(owner) if s is None]
        if missing:
            raise TemplateBindError(f"template {self.template_id!r} leaves shots {missing} uncovered")
        return owner  # type: ignore[return-value]


BUILTIN_TEMPLATES: dict[str, PacingTemplate] = {
    "as-planned": PacingTemplate("as-planned", (Segment(1, None, "medium"),), CUT, follow_plan=True),
    "slow": PacingTemplate("slow", (Segment(1, None, "slow"),)),
    "medium": PacingTemplate("medium", (Segment(1, None, "medium"),)),
    "fast": PacingTemplate("fast", (Segment(1, None, "fast"),)),
    "medium-crossfade": PacingTemplate("medium-crossfade", (Segment(1, None, "medium"),), Transition("crossfade", 0.5)),
}


def resolve_template(template_id: str | None, extra: Mapping[str, PacingTemplate] | None = None) -> PacingTemplate:
    pool = {**BUILTIN_TEMPLATES, **(extra or {})}
    key = template_id or "as-planned"
    if key not in pool:
        raise TemplateBindError(f"unknown pacing template {key!r}")
    return pool[key]


@dataclass(frozen=True)
class TimelineEntry:
    shot_index: int
    artifact_ref: str
    in_point_s: float
    out_point_s: float
    transition: Transition | None = None

    @property
    def length_s(self) -> float:
        return self.out_point_s - self.in_point_s

    def to_dict(self) -> dict:
        return {
            "shot_index": self.shot_index,
            "artifact_ref": self.artifact_ref,
            "in_point_s": self.in_point_s,
            "out_point_s": self.out_point_s,
            "transition": self.transition.to_dict() if self.transition else None,
        }


@dataclass(frozen=True)
class Timeline:
    entries: tuple[TimelineEntry, ...] = field(default=())

    @property
    def total_duration_s(self) -> float:
        total = sum(e.length_s for e in self.entries)
        overlaps = sum(e.transition.duration_s for e in self.entries[:-1] if e.transition is not None)
        return round(total - overlaps, 9)

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries], "total_duration_s": self.total_duration_s}

    def to_json(self) -> bytes:
        return canonical.dumps(self.to_dict())

    def to_edl(self) -> str:
        lines = []
        for e in self.entries:
            tr = str(e.transition) if e.transition is not None else "end"
            lines.append(f"{e.shot_index:03d}\t{e.artifact_ref}\t{e.in_point_s:.3f}\t{e.out_point_s:.3f}\t{tr}")
        return "\n".join(lines) + "\n"


def retime(artifact: ShotArtifact, target_s: float) -> TimelineEntry:
    """Tail-trim a shot to ``target_s`` seconds; never lengthens it."""
    if target_s < MIN_SHOT_S:
        raise ValueError(f"target {target_s} s below the {MIN_SHOT_S} s floor")
    return TimelineEntry(artifact.shot_index, artifact.video_ref, 0.0, min(artifact.duration_s, target_s))


def edit(
    shots: Sequence[ShotArtifact],
    template: PacingTemplate,
    *,
    planned_durations: Sequence[float] | None = None,
    tempo_targets: Mapping[str, float] = TEMPO_TARGETS,
) -> Timeline:
    """Retime each shot toward its segment target and join them with transitions."""
    if not shots:
        raise ValueError("nothing to edit")
    ordered = sorted(shots, key=lambda a: a.shot_index)
    if [a.shot_index for a in ordered] != list(range(1, len(ordered) + 1)):
        raise TemplateBindError("shots must be numbered 1..N without gaps")
    segments = template.bind(len(ordered))

    entries = []
    for art, seg in zip(ordered, segments):
        if seg.target_duration_s is not None:
            target = seg.target_duration_s
        elif template.follow_plan and planned_durations is not None:
            target = planned_durations[art.shot_index - 1]
        elif template.follow_plan:
            target = art.duration_s
        else:
            target = tempo_targets[seg.tempo]
        entries.append(retime(art, max(target, MIN_SHOT_S)))

    tr = template.transition_default
    joined = []
    for i, e in enumerate(entries):
        if i == len(entries) - 1:
            joined.append(e)
            continue
        if tr.kind == "crossfade" and tr.duration_s >= min(e.length_s, entries[i + 1].length_s):
            raise TemplateBindError(f"crossfade of {tr.duration_s} s does not fit around shot {e.shot_index}")
        joined.append(TimelineEntry(e.shot_index, e.artifact_ref, e.in_point_s, e.out_point_s, tr))
    return Timeline(tuple(joined))
