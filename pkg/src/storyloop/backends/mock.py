"""Symbolic mock world.

Videos are lists of frames, each frame a map from entity id to an
appearance token. A GCM-conditioned render copies the token derived from the
stored appearance vector; an unconditioned render draws a fresh random token,
which is how identity drift shows up at desk scale. Every output is a pure
function of the inputs and the world seed.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import threading
from dataclasses import dataclass
from typing import Mapping, Sequence

from .. import canonical
from ..errors import BackendError
from ..feedback import Feedback, FeedbackKind
from ..gcm import ArtifactRef, MemoryStore, appearance_token
from ..resources import prompt
from ..seeds import derive, shot_seed
from ..storyboard import CharacterDecl, ShotSpec, StoryboardPlan, planner_system_prompt
from ..synthesis import FrameRef, ShotArtifact, SynthesisMode, SynthesisRequest
from ..verifier import (
    PASS,
    Verdict,
    VerificationReport,
    classify_reason,
    fail,
    score_from_stages,
)

DEFAULT_FPS = 16


def keyword_digest(text: str) -> str:
    words = sorted(set(re.findall(r"[a-z0-9]+", text.lower())))
    return hashlib.sha256(" ".join(words).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class MockWorld:
    seed: int = 0
    token_space: int = 2**32
    fps: int = DEFAULT_FPS

    def style_digest(self, text: str) -> str:
        return keyword_digest(text)

    def rng(self, *parts: object) -> random.Random:
        return random.Random(derive("world", self.seed, *parts))

    def random_token(self, rng: random.Random) -> str:
        return f"rnd:{rng.randrange(self.token_space):08x}"


def _goal_tokens(world: MockWorld, request: SynthesisRequest, body: Mapping[str, str]) -> dict[str, str]:
    goal = request.goal_frame
    if goal is not None and goal.tokens is not None:
        return dict(goal.tokens)
    if request.entity_records:
        return dict(body)
    rng = world.rng("goal", request.seed, request.shot.index, goal.prompt if goal else "")
    return {e: world.random_token(rng) for e in request.shot.entities}


def mock_synthesize(world: MockWorld, request: SynthesisRequest) -> ShotArtifact:
    shot = request.shot
    n = max(1, round(shot.duration_s * world.fps))
    if request.entity_records:
        body = {r.entity_id: appearance_token(r.appearance_vec) for r in request.entity_records}
    else:
        rng = world.rng("synth", request.seed, shot.index)
        body = {e: world.random_token(rng) for e in shot.entities}

    frames = [body] * n
    anchored = request.mode is not SynthesisMode.T2V and request.first_frame_anchor is not None
    if anchored and request.first_frame_anchor.tokens is not None:
        first = dict(request.first_frame_anchor.tokens)
        for e, t in body.items():
            first.setdefault(e, t)
        frames[0] = first
    if request.mode is SynthesisMode.FLF2V:
        last = _goal_tokens(world, request, body)
        for e, t in body.items():
            last.setdefault(e, t)
        frames[-1] = last
    return ShotArtifact(
        shot_index=shot.index,
        mode_used=request.mode,
        seed=request.seed,
        video_ref=f"mock://{world.seed}/shot{shot.index}/{request.mode.value}/{request.seed}",
        frame_meta=tuple(dict(f) for f in frames),
        duration_s=n / world.fps,
        content_digest=world.style_digest(shot.prompt),
    )


def mock_verify(world: MockWorld, artifact: ShotArtifact, shot: ShotSpec, store: MemoryStore) -> VerificationReport:
    present = set().union(*artifact.frame_meta)
    missing = [e for e in shot.entities if e not in present]
    if missing:
        semantic = fail(f"missing character {', '.join(missing)}")
    elif artifact.content_digest != world.style_digest(shot.prompt):
        semantic = fail("frames do not match the script description")
    else:
        semantic = PASS

    identity: dict[str, Verdict] = {}
    for eid in shot.entities:
        rec = store.records.get(eid)
        if rec is None:
            continue
        canonical_tok = appearance_token(rec.appearance_vec)
        seen = [f[eid] for f in artifact.frame_meta if eid in f]
        if not seen:
            identity[eid] = fail("character not present in frame")
        elif any(t != canonical_tok for t in seen):
            identity[eid] = fail("appearance differs from the master portrait")
        else:
            identity[eid] = PASS

    feedback = []
    if not semantic.passed:
        feedback.append(Feedback(classify_reason(semantic.reason, identity_stage=False), semantic.reason, tuple(missing)))
    for eid, v in identity.items():
        if not v.passed:
            feedback.append(Feedback(classify_reason(v.reason, identity_stage=True), v.reason, (eid,)))
    return VerificationReport(score_from_stages(semantic, identity), tuple(feedback), semantic, identity)


class MockSynthesisBackend:
    def __init__(self, world: MockWorld | None = None):
        self.world = world or MockWorld()
        self.calls: list[SynthesisRequest] = []
        self._lock = threading.Lock()

    def generate(self, request: SynthesisRequest) -> ShotArtifact:
        with self._lock:
            self.calls.append(request)
        return mock_synthesize(self.world, request)

    def render_portrait(self, decl: CharacterDecl, style: str) -> ArtifactRef:
        text = prompt("gcm_portrait").format(character=f"{decl.name}: {decl.static_features}", style=style or "Default")
        return ArtifactRef(uri=f"mock://portrait/{decl.id}", content=text.encode("utf-8"))


class MockVerifier:
    def __init__(self, world: MockWorld | None = None):
        self.world = world or MockWorld()

    def verify(self, artifact: ShotArtifact, shot: ShotSpec, store: MemoryStore) -> VerificationReport:
        return mock_verify(self.world, artifact, shot, store)


class SymbolicVlm:
    """Chat-level stand-in for a VLM that reads the symbolic frame metadata."""

    def __init__(self):
        self.calls: list[tuple[str, list[FrameRef]]] = []

    def ask(self, prompt_text: str, images: Sequence[FrameRef]) -> str:
        self.calls.append((prompt_text, list(images)))
        if prompt_text.startswith("Act as a professional film reviewer"):
            return self._semantic(prompt_text, images[0])
        if prompt_text.startswith("Strictly compare"):
            return self._identity(images[0], images[1])
        return "I am not sure what you are asking."

    @staticmethod
    def _semantic(text: str, frame: FrameRef) -> str:
        m = re.search(r"Script Description: (.*?)\nRequirement:", text, re.DOTALL)
        script = m.group(1) if m else ""
        description, _, chars = script.partition("\nCharacters: ")
        wanted = [c.strip() for c in chars.split(",") if c.strip()]
        tokens = frame.tokens or {}
        missing = [c for c in wanted if c not in tokens]
        if missing:
            return f"FAIL: missing character {', '.join(missing)}"
        if frame.digest is not None and frame.digest != keyword_digest(description):
            return "FAIL: frame does not show the described action"
        return "PASS"

    @staticmethod
    def _identity(portrait: FrameRef, frame: FrameRef) -> str:
        (eid, tok), = (portrait.tokens or {"?": ""}).items()
        got = (frame.tokens or {}).get(eid)
        if got is None:
            return "FAIL: character not present in frame"
        if got != tok:
            return "FAIL: appearance differs from the master portrait"
        return "PASS"


# --- planners -------------------------------------------------------------------------


def template_plan(concept: str, language_tag: str = "en") -> StoryboardPlan:
    """A fixed four-shot plan around a single protagonist."""
    concept = concept.strip()
    lead = CharacterDecl("protagonist", "Protagonist", f"the central figure of: {concept}; consistent outfit and hairstyle")
    beats = [
        ("wakes up and starts the day", "ff2v", None, True),
        ("works through the main task", "ff2v", "the task finished on screen", False),
        ("moves across town toward the goal", "flf2v", "arrives at the destination at dusk", True),
        ("reflects on the day", "ff2v", None, False),
    ]
    shots = []
    for i, (beat, mode, last, connect) in enumerate(beats, start=1):
        shots.append(
            ShotSpec(
                index=i,
                prompt=f"The protagonist {beat}. {concept}",
                entities=("protagonist",),
                relations=(),
                style="natural light, handheld",
                duration_s=4.0,
                generation_mode=mode,
                camera_angle="medium shot",
                lighting="soft daylight",
                first_frame_prompt=f"The protagonist about to {beat.split(' ', 1)[0]}",
                last_frame_prompt=last,
                connect_to_next=connect,
                audio=None,
            )
        )
    return StoryboardPlan(
        title=concept[:60],
        target_audience="general",
        genre="slice of life",
        style="natural light, handheld",
        pacing="medium",
        logline=concept,
        characters=(lead,),
        shots=tuple(shots),
    )


class MockPlanner:
    """Deterministic planner: returns a fixed plan or a template built from the idea."""

    def __init__(self, plan: StoryboardPlan | None = None):
        self.plan = plan
        self.calls: list[tuple[str, str]] = []

    def complete(self, system: str, user: str) -> str:
        self.calls.append((system, user))
        if system == planner_system_prompt():
            if self.plan is not None:
                return canonical.dumps(self.plan.to_dict()).decode("utf-8")
            idea = json.loads(user.split("\n\n", 1)[0])["idea"]
            return canonical.dumps(template_plan(idea["concept_text"], idea["language_tag"]).to_dict()).decode("utf-8")
        if system == prompt("refine_system"):
            req = json.loads(user)
            shot, fb = req["shot"], req["feedback"]
            registry = set(req["registry"] or ())
            added = [e for e in fb["offending_entities"] if e in registry and e not in shot["entities"]]
            return canonical.dumps(
                {
                    "prompt": f"{shot['prompt']} ({fb['detail']})",
                    "first_frame_prompt": shot["first_frame_prompt"],
                    "entities": added,
                }
            ).decode("utf-8")
        raise BackendError("http_status", "mock planner got an unrecognized request")


class ScriptedPlanner:
    """Replays canned responses in order."""

    def __init__(self, responses: Sequence[str]):
        self.responses = list(responses)
        self.calls: list[tuple[str, str]] = []

    def complete(self, system: str, user: str) -> str:
        self.calls.append((system, user))
        if len(self.calls) > len(self.responses):
            raise BackendError("http_status", "scripted planner exhausted")
        return self.responses[len(self.calls) - 1]


# --- verifiers -------------------------------------------------------------------------


def scripted_report(spec: str | VerificationReport, shot: ShotSpec) -> VerificationReport:
    """Build a report from a short spec such as ``pass`` or ``fail:appearance``."""
    if isinstance(spec, VerificationReport):
        return spec
    if spec == "pass":
        return VerificationReport(1.0, (), PASS, {e: PASS for e in shot.entities})
    kind = spec.split(":", 1)[1] if ":" in spec else "semantic"
    identity = {e: PASS for e in shot.entities}
    target = shot.entities[0] if shot.entities else None
    if kind == "semantic":
        sem = fail("scene does not match the script")
        fb = Feedback(FeedbackKind.SEMANTIC_MISMATCH, sem.reason)
    elif kind == "missing":
        sem = fail(f"missing character {target}")
        fb = Feedback(FeedbackKind.MISSING_ENTITY, sem.reason, (target,) if target else ())
    elif kind in ("appearance", "temporal"):
        sem = PASS
        reason = "appearance differs from the master portrait" if kind == "appearance" else "flicker between frames"
        k = FeedbackKind.APPEARANCE_INCONSISTENCY if kind == "appearance" else FeedbackKind.TEMPORAL_DISCONTINUITY
        if target is not None:
            identity[target] = fail(reason)
        fb = Feedback(k, reason, (target,) if target else ())
    else:
        raise ValueError(f"unknown scripted verdict {spec!r}")
    score = score_from_stages(sem, identity)
    if kind in ("appearance", "temporal") and target is None:
        score = 0.5
    return VerificationReport(score, (fb,), sem, identity)


class ScriptedVerifier:
    """Returns scripted reports per shot index, then defers to ``fallback`` (or passes)."""

    def __init__(self, script: Mapping[int, Sequence[str | VerificationReport]], fallback=None):
        self.script = {k: list(v) for k, v in script.items()}
        self.fallback = fallback
        self.calls: list[tuple[int, int]] = []
        self._used: dict[int, int] = {}

    def verify(self, artifact: ShotArtifact, shot: ShotSpec, store: MemoryStore) -> VerificationReport:
        i = shot.index
        n = self._used.get(i, 0)
        self._used[i] = n + 1
        self.calls.append((i, artifact.seed))
        steps = self.script.get(i, [])
        if n < len(steps):
            return scripted_report(steps[n], shot)
        if self.fallback is not None:
            return self.fallback.verify(artifact, shot, store)
        return scripted_report("pass", shot)


class ConstantVerifier:
    """Returns the same scripted verdict for every shot."""

    def __init__(self, spec: str = "fail:appearance"):
        self.spec = spec

    def verify(self, artifact: ShotArtifact, shot: ShotSpec, store: MemoryStore) -> VerificationReport:
        return scripted_report(self.spec, shot)


class StochasticVerifier:
    """Passes attempt 1 with probability ``p1`` and every retry with ``q``.

    The attempt number is recovered from the artifact seed, so the verdict is
    a pure function of (run seed, shot index, attempt).
    """

    def __init__(self, p1: float, q: float, run_seed: int, verdict_seed: int = 0):
        if not (0.0 <= p1 <= 1.0 and 0.0 <= q <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        self.p1, self.q = p1, q
        self.run_seed = run_seed
        self.verdict_seed = verdict_seed

    def verify(self, artifact: ShotArtifact, shot: ShotSpec, store: MemoryStore) -> VerificationReport:
        attempt = artifact.seed - shot_seed(self.run_seed, shot.index) + 1
        rng = random.Random(derive("verdict", self.verdict_seed, self.run_seed, shot.index, attempt))
        p = self.p1 if attempt <= 1 else self.q
        if rng.random() < p:
            return scripted_report("pass", shot)
        kind = "semantic" if rng.random() < 0.5 else "appearance"
        return scripted_report(f"fail:{kind}", shot)


__all__ = [
    "DEFAULT_FPS",
    "ConstantVerifier",
    "MockPlanner",
    "MockSynthesisBackend",
    "MockVerifier",
    "MockWorld",
    "ScriptedPlanner",
    "ScriptedVerifier",
    "StochasticVerifier",
    "SymbolicVlm",
    "keyword_digest",
    "mock_synthesize",
    "mock_verify",
    "scripted_report",
    "template_plan",
]
