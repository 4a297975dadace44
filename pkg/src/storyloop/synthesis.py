"""Mode selection, request assembly, backend invocation and the consistency gate."""

from __future__ import annotations

import enum
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .errors import BackendError, MissingAnchor, UnknownEntity
from .gcm import ArtifactRef, EntityRecord, FeatureExtractor, MemoryStore, cosine, retrieve
from .storyboard import CharacterDecl, ShotSpec

DEFAULT_DELTA = 0.05
DEFAULT_VCC_THETA = 0.85
_EPS = 1e-9


class SynthesisMode(str, enum.Enum):
    T2V = "T2V"
    FF2V = "FF2V"
    FLF2V = "FLF2V"

    @property
    def rank(self) -> int:
        return _RANK[self]

    def __lt__(self, other):
        if not isinstance(other, SynthesisMode):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other):
        if not isinstance(other, SynthesisMode):
            return NotImplemented
        return self.rank <= other.rank


_RANK = {SynthesisMode.T2V: 0, SynthesisMode.FF2V: 1, SynthesisMode.FLF2V: 2}


@dataclass(frozen=True)
class ModeParams:
    width: int
    height: int
    steps: int
    checkpoint_id: str

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.width, self.height)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "steps": self.steps, "checkpoint_id": self.checkpoint_id}

    @classmethod
    def from_dict(cls, d: dict) -> "ModeParams":
        return cls(int(d["width"]), int(d["height"]), int(d["steps"]), str(d["checkpoint_id"]))


DEFAULT_MODE_PARAMS: dict[SynthesisMode, ModeParams] = {
    SynthesisMode.T2V: ModeParams(832, 480, 40, "Wan2.1-T2V-14B"),
    SynthesisMode.FF2V: ModeParams(832, 480, 30, "Wan2.1-I2V-14B-480P"),
    SynthesisMode.FLF2V: ModeParams(1280, 720, 30, "Wan2.1-FLF2V-14B-720P"),
}


@dataclass(frozen=True)
class FrameRef:
    """A single frame: either a concrete frame of an artifact or a goal to render.

    ``tokens`` carries the symbolic entity map for mock artifacts; ``prompt``
    is set for goal frames that still need to be rendered.
    """

    uri: str
    index: int | None = None
    tokens: dict[str, str] | None = None
    prompt: str | None = None
    digest: str | None = None

    def to_dict(self) -> dict:
        return {"uri": self.uri, "index": self.index, "tokens": self.tokens, "prompt": self.prompt, "digest": self.digest}

    @classmethod
    def from_dict(cls, d: dict | None) -> "FrameRef | None":
        if d is None:
            return None
        return cls(d["uri"], d.get("index"), d.get("tokens"), d.get("prompt"), d.get("digest"))


@dataclass(frozen=True)
class SynthesisRequest:
    shot: ShotSpec
    mode: SynthesisMode
    entity_records: tuple[EntityRecord, ...]
    first_frame_anchor: FrameRef | None
    goal_frame: FrameRef | None
    backend_params: ModeParams
    seed: int

    def to_dict(self) -> dict:
        return {
            "shot": self.shot.to_dict(),
            "mode": self.mode.value,
            "entity_records": [r.to_dict() for r in self.entity_records],
            "first_frame_anchor": self.first_frame_anchor.to_dict() if self.first_frame_anchor else None,
            "goal_frame": self.goal_frame.to_dict() if self.goal_frame else None,
            "backend_params": self.backend_params.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisRequest":
        return cls(
            shot=ShotSpec.from_dict(d["shot"]),
            mode=SynthesisMode(d["mode"]),
            entity_records=tuple(EntityRecord.from_dict(r) for r in d["entity_records"]),
            first_frame_anchor=FrameRef.from_dict(d["first_frame_anchor"]),
            goal_frame=FrameRef.from_dict(d["goal_frame"]),
            backend_params=ModeParams.from_dict(d["backend_params"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class ShotArtifact:
    shot_index: int
    mode_used: SynthesisMode
    seed: int
    video_ref: str
    frame_meta: tuple[dict[str, str], ...]
    duration_s: float
    content_digest: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "frame_meta", tuple(self.frame_meta))
        if not self.frame_meta:
            raise ValueError("artifact must have at least one frame")

    @property
    def n_frames(self) -> int:
        return len(self.frame_meta)

    def frame(self, i: int) -> FrameRef:
        return FrameRef(
            uri=f"{self.video_ref}#frame={i}", index=i, tokens=dict(self.frame_meta[i]), digest=self.content_digest
        )

    def last_frame(self) -> FrameRef:
        return self.frame(self.n_frames - 1)

    def to_dict(self) -> dict:
        return {
            "shot_index": self.shot_index,
            "mode_used": self.mode_used.value,
            "seed": self.seed,
            "video_ref": self.video_ref,
            "frame_meta": [dict(f) for f in self.frame_meta],
            "duration_s": self.duration_s,
            "content_digest": self.content_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShotArtifact":
        return cls(
            shot_index=int(d["shot_index"]),
            mode_used=SynthesisMode(d["mode_used"]),
            seed=int(d["seed"]),
            video_ref=d["video_ref"],
            frame_meta=tuple(dict(f) for f in d["frame_meta"]),
            duration_s=float(d["duration_s"]),
            content_digest=d.get("content_digest"),
        )


@dataclass(frozen=True)
class VccReport:
    per_entity_similarity: dict[str, float] = field(default_factory=dict)
    theta: float = DEFAULT_VCC_THETA

    @property
    def passed(self) -> bool:
        return all(s >= self.theta for s in self.per_entity_similarity.values())

    @property
    def failing(self) -> list[str]:
        return [e for e, s in self.per_entity_similarity.items() if s < self.theta]


class SynthesisBackend(Protocol):
    def generate(self, request: SynthesisRequest) -> ShotArtifact: ...

    def render_portrait(self, decl: CharacterDecl, style: str) -> ArtifactRef: ...


# --- policy -------------------------------------------------------------------


def select_mode(
    prev_score: float | None,
    tau: float,
    overlap: float,
    shot: ShotSpec,
    flf2v_enabled: bool,
    *,
    delta: float = DEFAULT_DELTA,
) -> SynthesisMode:
    """Pick the initial generation mode for a shot.

    Opening shots and shots that share no entity with their predecessor are
    rendered from text alone. Otherwise the previous shot's accepted score
    decides: near the threshold keeps a first-frame anchor, well below it
    adds a goal frame. A planner-declared ``flf2v`` is honoured when the
    mode is enabled. A goal frame needs ``last_frame_prompt``; without one
    the policy falls back to FF2V.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    if shot.index == 1 or prev_score is None:
        return SynthesisMode.T2V
    if overlap == 0.0:
        return SynthesisMode.T2V
    goal_mode = SynthesisMode.FLF2V if flf2v_enabled and shot.last_frame_prompt else SynthesisMode.FF2V
    if shot.generation_mode == "flf2v":
        return goal_mode
    if abs(prev_score - tau) <= delta + _EPS:
        return SynthesisMode.FF2V
    if prev_score < tau - delta:
        return goal_mode
    # previous shot comfortably above threshold: follow the planner
    return SynthesisMode.T2V if shot.generation_mode == "t2v" else SynthesisMode.FF2V


def escalate_mode(mode: SynthesisMode, flf2v_enabled: bool) -> SynthesisMode:
    if mode is SynthesisMode.T2V:
        return SynthesisMode.FF2V
    if mode is SynthesisMode.FF2V and flf2v_enabled:
        return SynthesisMode.FLF2V
    return mode


def goal_frame_for(shot: ShotSpec) -> FrameRef:
    if not shot.last_frame_prompt:
        raise ValueError(f"shot {shot.index}: FLF2V needs a last_frame_prompt")
    h = hashlib.sha256(shot.last_frame_prompt.encode("utf-8")).hexdigest()[:16]
    return FrameRef(uri=f"goal:{shot.index}:{h}", prompt=shot.last_frame_prompt)


def build_request(
    shot: ShotSpec,
    mode: SynthesisMode,
    store: MemoryStore,
    prev: ShotArtifact | None,
    params: ModeParams,
    seed: int,
    *,
    prev_connect_to_next: bool = False,
    include_records: bool = True,
    tally: Counter | None = None,
    known_records: Sequence[EntityRecord] = (),
) -> SynthesisRequest:
    """Assemble one synthesis request.

    ``known_records`` lets a caller reuse records it already fetched for the
    same shot, so each (shot, entity) pair costs at most one lookup.
    """
    cached = {r.entity_id: r for r in known_records}
    records = []
    for eid in shot.entities:
        rec = cached.get(eid)
        if rec is None:
            rec = retrieve(store, eid, tally=tally)
        if rec is None:
            raise UnknownEntity(eid)
        records.append(rec)

    anchor = None
    if mode is not SynthesisMode.T2V:
        if prev is not None:
            anchor = prev.last_frame()
        elif shot.index > 1 and prev_connect_to_next:
            raise MissingAnchor(f"shot {shot.index}: {mode.value} needs the previous shot's last frame")
    goal = goal_frame_for(shot) if mode is SynthesisMode.FLF2V else None

    return SynthesisRequest(
        shot=shot,
        mode=mode,
        entity_records=tuple(records) if include_records else (),
        first_frame_anchor=anchor,
        goal_frame=goal,
        backend_params=params,
        seed=seed,
    )


def synthesize(request: SynthesisRequest, backend: SynthesisBackend) -> ShotArtifact:
    art = backend.generate(request)
    if art.shot_index != request.shot.index or art.mode_used is not request.mode or art.seed != request.seed:
        raise BackendError("http_status", "backend artifact does not match its request")
    return art


def vcc_check(
    artifact: ShotArtifact,
    records: Sequence[EntityRecord],
    embed: FeatureExtractor,
    theta: float = DEFAULT_VCC_THETA,
) -> VccReport:
    """Minimum-over-frames cosine similarity of each stored vector to the shot."""
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    cache: dict[str, tuple[float, ...]] = {}
    sims: dict[str, float] = {}
    for rec in records:
        best = None
        for frame in artifact.frame_meta:
            tok = frame.get(rec.entity_id)
            if tok is None:
                continue
            if tok not in cache:
                cache[tok] = embed.embed(tok.encode("utf-8"))
            s = cosine(rec.appearance_vec, cache[tok])
            best = s if best is None else min(best, s)
        sims[rec.entity_id] = max(0.0, min(1.0, best)) if best is not None else 0.0
    return VccReport(per_entity_similarity=sims, theta=theta)


def request_to_wire(request: SynthesisRequest, *, last_frame_uri: str | None = None) -> dict:
    """Serialize a request to the synthesis endpoint's JSON body."""
    shot = request.shot
    anchor = request.first_frame_anchor
    if request.mode is SynthesisMode.FLF2V and last_frame_uri is None:
        if request.goal_frame is None:
            raise ValueError("FLF2V request without goal frame")
        last_frame_uri = request.goal_frame.uri
    return {
        "mode": request.mode.value,
        "prompt": shot.prompt,
        "first_frame": anchor.uri if anchor is not None else None,
        "last_frame": last_frame_uri if request.mode is SynthesisMode.FLF2V else None,
        "width": request.backend_params.width,
        "height": request.backend_params.height,
        "steps": request.backend_params.steps,
        "checkpoint_id": request.backend_params.checkpoint_id,
        "duration_s": shot.duration_s,
        "seed": request.seed,
        "entity_refs": [
            {"id": r.entity_id, "portrait_uri": r.portrait_ref, "attributes": dict(r.attributes)}
            for r in request.entity_records
        ],
    }
