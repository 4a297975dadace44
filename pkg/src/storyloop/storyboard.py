"""Shot-plan data model, strict parsing, canonical serialization and refinement."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Collection, Iterable, Protocol

from jsonschema import Draft202012Validator

from . import canonical
from .errors import PlanParseError
from .feedback import Feedback
from .resources import prompt, schema

log = logging.getLogger(__name__)

DEFAULT_MAX_SHOTS = 24
GENERATION_MODES = ("t2v", "ff2v", "flf2v")


class PlannerClient(Protocol):
    def complete(self, system: str, user: str) -> str: ...


@dataclass(frozen=True)
class Idea:
    concept_text: str
    style_ref: str | None = None
    pacing_template_id: str | None = None
    language_tag: str = "en"

    def __post_init__(self):
        if not self.concept_text.strip():
            raise ValueError("concept_text must not be blank")

    def to_dict(self) -> dict:
        return {
            "concept_text": self.concept_text,
            "style_ref": self.style_ref,
            "pacing_template_id": self.pacing_template_id,
            "language_tag": self.language_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Idea":
        return cls(
            d["concept_text"], d.get("style_ref"), d.get("pacing_template_id"), d.get("language_tag") or "en"
        )


@dataclass(frozen=True)
class CharacterDecl:
    id: str
    name: str
    static_features: str

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "static_features": self.static_features}


@dataclass(frozen=True)
class Relation:
    subject: str
    predicate: str
    object: str

    def to_dict(self) -> dict:
        return {"subject": self.subject, "predicate": self.predicate, "object": self.object}


@dataclass(frozen=True)
class ShotSpec:
    index: int
    prompt: str
    entities: tuple[str, ...]
    relations: tuple[Relation, ...]
    style: str
    duration_s: float
    generation_mode: str
    camera_angle: str
    lighting: str
    first_frame_prompt: str
    last_frame_prompt: str | None = None
    connect_to_next: bool = False
    audio: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "duration_s", float(self.duration_s))

    @property
    def referenced_entities(self) -> list[str]:
        """Entity ids used by the shot, in first-mention order."""
        seen = dict.fromkeys(self.entities)
        for r in self.relations:
            seen.setdefault(r.subject)
            seen.setdefault(r.object)
        return list(seen)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "prompt": self.prompt,
            "entities": list(self.entities),
            "relations": [r.to_dict() for r in self.relations],
            "style": self.style,
            "duration_s": self.duration_s,
            "generation_mode": self.generation_mode,
            "camera_angle": self.camera_angle,
            "lighting": self.lighting,
            "first_frame_prompt": self.first_frame_prompt,
            "last_frame_prompt": self.last_frame_prompt,
            "connect_to_next": self.connect_to_next,
            "audio": self.audio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShotSpec":
        return cls(
            index=d["index"],
            prompt=d["prompt"],
            entities=tuple(d["entities"]),
            relations=tuple(Relation(**r) for r in d["relations"]),
            style=d["style"],
            duration_s=d["duration_s"],
            generation_mode=d["generation_mode"],
            camera_angle=d["camera_angle"],
            lighting=d["lighting"],
            first_frame_prompt=d["first_frame_prompt"],
            last_frame_prompt=d.get("last_frame_prompt"),
            connect_to_next=d["connect_to_next"],
            audio=d.get("audio"),
        )


@dataclass(frozen=True)
class StoryboardPlan:
    title: str
    target_audience: str
    genre: str
    style: str
    pacing: str
    logline: str
    characters: tuple[CharacterDecl, ...]
    shots: tuple[ShotSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "characters", tuple(self.characters))
        object.__setattr__(self, "shots", tuple(self.shots))

    @property
    def registry(self) -> dict[str, CharacterDecl]:
        return {c.id: c for c in self.characters}

    def shot(self, index: int) -> ShotSpec:
        return self.shots[index - 1]

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "target_audience": self.target_audience,
            "genre": self.genre,
            "style": self.style,
            "pacing": self.pacing,
            "logline": self.logline,
            "characters": [c.to_dict() for c in self.characters],
            "shots": [s.to_dict() for s in self.shots],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StoryboardPlan":
        return cls(
            title=d["title"],
            target_audience=d["target_audience"],
            genre=d["genre"],
            style=d["style"],
            pacing=d["pacing"],
            logline=d["logline"],
            characters=tuple(CharacterDecl(**c) for c in d["characters"]),
            shots=tuple(ShotSpec.from_dict(s) for s in d["shots"]),
        )


@dataclass(frozen=True)
class PlanValidationReport:
    violations: tuple[tuple[int | str, str, str], ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def rule_ids(self) -> list[str]:
        return [v[1] for v in self.violations]


# --- validation -----------------------------------------------------------

_VALIDATOR = Draft202012Validator(schema("storyboard.v1.json"))

_KEYWORD_RULES = {
    "additionalProperties": "unknown_field",
    "required": "missing_field",
    "type": "type_error",
    "enum": "invalid_mode",
    "uniqueItems": "duplicate_entity_ref",
    "minLength": "empty_field",
    "pattern": "empty_field",
    "minimum": "index_sequence",
}


def _schema_rule(err) -> str:
    path = list(err.absolute_path)
    if "then" in err.schema_path:
        return "missing_last_frame_prompt"
    if path == ["shots"] and err.validator == "minItems":
        return "empty_plan"
    if path and path[-1] == "duration_s" and err.validator == "exclusiveMinimum":
        return "non_positive_duration"
    return _KEYWORD_RULES.get(err.validator, "schema")


def _location(path: list) -> int | str:
    if len(path) >= 2 and path[0] == "shots" and isinstance(path[1], int):
        return path[1] + 1
    return "plan"


def validate_plan(data: dict | StoryboardPlan, *, max_shots: int = DEFAULT_MAX_SHOTS) -> PlanValidationReport:
    """Check a plan (typed or raw JSON object) against schema and cross-reference rules."""
    if isinstance(data, StoryboardPlan):
        data = data.to_dict()
    violations: list[tuple[int | str, str, str]] = []
    if not isinstance(data, dict):
        return PlanValidationReport((("plan", "type_error", "top level must be a JSON object"),))

    for err in sorted(_VALIDATOR.iter_errors(data), key=lambda e: list(map(str, e.absolute_path))):
        violations.append((_location(list(err.absolute_path)), _schema_rule(err), err.message))
    if violations:
        return PlanValidationReport(tuple(violations))

    ids = [c["id"] for c in data["characters"]]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    for d in dupes:
        violations.append(("plan", "duplicate_entity", f"character id {d!r} declared more than once"))
    known = set(ids)
    shots = data["shots"]
    if len(shots) > max_shots:
        violations.append(("plan", "too_many_shots", f"{len(shots)} shots exceeds cap {max_shots}"))
    for pos, s in enumerate(shots, start=1):
        if s["index"] != pos:
            violations.append((pos, "index_sequence", f"expected index {pos}, got {s['index']}"))
        refs = list(s["entities"])
        for r in s["relations"]:
            refs += [r["subject"], r["object"]]
        for ref in dict.fromkeys(refs):
            if ref not in known:
                violations.append((pos, "unknown_entity", f"entity {ref!r} is not in the character registry"))
    return PlanValidationReport(tuple(violations))


def parse_plan_json(data: bytes | str, *, max_shots: int = DEFAULT_MAX_SHOTS) -> StoryboardPlan:
    """Strictly parse a storyboard payload.

    Raises:
        PlanParseError: with one rule id per violated invariant.
    """
    try:
        obj = canonical.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PlanParseError([("plan", "json_syntax", str(e))]) from None
    report = validate_plan(obj, max_shots=max_shots)
    if not report.ok:
        raise PlanParseError(report.violations)
    return StoryboardPlan.from_dict(obj)


def serialize_plan(plan: StoryboardPlan) -> bytes:
    return canonical.dumps(plan.to_dict())


# --- planner interaction ----------------------------------------------------


def planner_system_prompt() -> str:
    return prompt("planner_system") + "\n" + prompt("planner_schema_hint")


def _idea_message(idea: Idea) -> str:
    return canonical.dumps({"idea": idea.to_dict(), "language": idea.language_tag}).decode("utf-8")


def _repair_message(user: str, err: PlanParseError) -> str:
    lines = "\n".join(f"- {loc} {rule}: {msg}" for loc, rule, msg in err.violations)
    return (
        f"{user}\n\nYour previous output was rejected:\n{lines}\n"
        "Return the corrected plan as STRICT JSON only."
    )


def plan(idea: Idea, planner: PlannerClient, *, max_shots: int = DEFAULT_MAX_SHOTS) -> StoryboardPlan:
    """Ask the planner for a storyboard, allowing a single repair round-trip."""
    system = planner_system_prompt()
    user = _idea_message(idea)
    raw = planner.complete(system, user)
    try:
        return parse_plan_json(raw, max_shots=max_shots)
    except PlanParseError as first:
        log.info("plan rejected (%s), requesting repair", ", ".join(first.rule_ids))
        raw = planner.complete(system, _repair_message(user, first))
        return parse_plan_json(raw, max_shots=max_shots)


def refine_semantic(
    shot: ShotSpec,
    feedback: Feedback,
    planner: PlannerClient,
    *,
    registry: Collection[str] | None = None,
) -> ShotSpec:
    """Rewrite a shot's prompts from semantic verifier feedback.

    Index, generation mode and duration are preserved and the entity list
    can only grow.
    """
    if not feedback.kind.is_semantic:
        raise ValueError(f"refine_semantic does not handle {feedback.kind.value} feedback")
    user = canonical.dumps(
        {
            "shot": shot.to_dict(),
            "feedback": feedback.to_dict(),
            "registry": sorted(registry) if registry is not None else None,
        }
    ).decode("utf-8")
    raw = planner.complete(prompt("refine_system"), user)
    try:
        patch = canonical.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PlanParseError([(shot.index, "json_syntax", str(e))]) from None
    if not isinstance(patch, dict):
        raise PlanParseError([(shot.index, "type_error", "refinement must be a JSON object")])
    extra = set(patch) - {"prompt", "first_frame_prompt", "entities"}
    if extra:
        raise PlanParseError([(shot.index, "unknown_field", f"unexpected keys {sorted(extra)}")])

    new_prompt = patch.get("prompt", shot.prompt)
    first_frame = patch.get("first_frame_prompt", shot.first_frame_prompt)
    if not isinstance(new_prompt, str) or not new_prompt.strip():
        raise PlanParseError([(shot.index, "empty_field", "prompt must be a non-empty string")])
    if not isinstance(first_frame, str):
        raise PlanParseError([(shot.index, "type_error", "first_frame_prompt must be a string")])
    added = patch.get("entities", [])
    if not isinstance(added, list) or not all(isinstance(e, str) and e for e in added):
        raise PlanParseError([(shot.index, "type_error", "entities must be a list of ids")])
    entities = tuple(dict.fromkeys([*shot.entities, *added]))
    if registry is not None:
        unknown = [e for e in entities if e not in registry]
        if unknown:
            raise PlanParseError([(shot.index, "unknown_entity", f"unknown ids {unknown}")])
    return replace(shot, prompt=new_prompt, first_frame_prompt=first_frame, entities=entities)


def iter_entity_ids(shots: Iterable[ShotSpec]) -> list[str]:
    return list(dict.fromkeys(e for s in shots for e in s.referenced_entities))
