"""Two-stage shot verification and the verifier-guided regeneration loop."""

from __future__ import annotations

import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Collection, Mapping, Protocol, Sequence

from .errors import VerdictParseError
from .feedback import Feedback, FeedbackKind
from .gcm import DEFAULT_ALPHA, FeatureExtractor, MemoryStore, appearance_token, update_from_shot
from .resources import prompt
from .storyboard import PlannerClient, ShotSpec, refine_semantic
from .synthesis import (
    DEFAULT_MODE_PARAMS,
    FrameRef,
    ModeParams,
    ShotArtifact,
    SynthesisBackend,
    SynthesisMode,
    SynthesisRequest,
    build_request,
    escalate_mode,
    synthesize,
    vcc_check,
)

__all__ = [
    "Feedback",
    "FeedbackKind",
    "FrameSampling",
    "Verdict",
    "VerificationReport",
    "AttemptRecord",
    "RegenOutcome",
    "LoopDeps",
    "parse_verdict",
    "score_from_stages",
    "sample_frames",
    "verify",
    "regen_loop",
]

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.9
DEFAULT_MAX_RETRIES = 2


@dataclass(frozen=True)
class Verdict:
    passed: bool
    reason: str = ""

    def __str__(self) -> str:
        return "PASS" if self.passed else f"FAIL({self.reason})"

    def to_dict(self) -> dict:
        return {"verdict": "PASS" if self.passed else "FAIL", "reason": self.reason}

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        return cls(d["verdict"] == "PASS", d.get("reason", ""))


PASS = Verdict(True)


def fail(reason: str) -> Verdict:
    return Verdict(False, reason)


@dataclass(frozen=True)
class VerificationReport:
    score: float
    feedback: tuple[Feedback, ...] = ()
    stage_semantic: Verdict = PASS
    stage_identity: dict[str, Verdict] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "feedback", tuple(self.feedback))

    @property
    def passed(self) -> bool:
        return not self.feedback

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "feedback": [f.to_dict() for f in self.feedback],
            "stage_semantic": self.stage_semantic.to_dict(),
            "stage_identity": {k: v.to_dict() for k, v in self.stage_identity.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        return cls(
            score=float(d["score"]),
            feedback=tuple(Feedback.from_dict(f) for f in d["feedback"]),
            stage_semantic=Verdict.from_dict(d["stage_semantic"]),
            stage_identity={k: Verdict.from_dict(v) for k, v in d["stage_identity"].items()},
        )


# --- verdict parsing and scoring ---------------------------------------------

_VERDICT_RE = re.compile(r"^[\s*_`\"'>#]*(PASS|FAIL)\b[\s*_`\"':.,;\-]*(.*)$", re.IGNORECASE | re.DOTALL)


def parse_verdict(text: str) -> Verdict:
    m = _VERDICT_RE.match(text or "")
    if not m:
        raise VerdictParseError(f"no PASS/FAIL verdict in {text!r}")
    if m.group(1).upper() == "PASS":
        return PASS
    reason = m.group(2).strip().rstrip("*_`\"'").strip()
    return fail(reason or "unspecified")


def score_from_stages(
    semantic: Verdict, identity: Mapping[str, Verdict], *, w_semantic: float = 0.5, w_identity: float = 0.5
) -> float:
    frac = 1.0 if not identity else sum(v.passed for v in identity.values()) / len(identity)
    return w_semantic * (1.0 if semantic.passed else 0.0) + w_identity * frac


_MISSING_RE = re.compile(r"\bmissing\b|\babsent\b|not (?:present|visible|shown|in (?:the )?frame)", re.I)
_TEMPORAL_RE = re.compile(r"flicker|discontinu|jump cut|temporal|glitch", re.I)


def classify_reason(reason: str, *, identity_stage: bool) -> FeedbackKind:
    if _MISSING_RE.search(reason):
        return FeedbackKind.MISSING_ENTITY
    if _TEMPORAL_RE.search(reason):
        return FeedbackKind.TEMPORAL_DISCONTINUITY
    return FeedbackKind.APPEARANCE_INCONSISTENCY if identity_stage else FeedbackKind.SEMANTIC_MISMATCH


# --- frame sampling -------------------------------------------------------------


@dataclass(frozen=True)
class FrameSampling:
    policy: str = "keyframes"
    k: int = 4

    def __post_init__(self):
        if self.policy not in ("keyframes", "uniform", "all"):
            raise ValueError(f"unknown sampling policy {self.policy!r}")
        if self.policy != "all" and self.k < 1:
            raise ValueError("k must be positive")

    @classmethod
    def parse(cls, text: str) -> "FrameSampling":
        m = re.fullmatch(r"(keyframes|uniform)\((\d+)\)|(all)", text.strip())
        if not m:
            raise ValueError(f"bad sampling spec {text!r}")
        return cls("all", 0) if m.group(3) else cls(m.group(1), int(m.group(2)))

    def __str__(self) -> str:
        return "all" if self.policy == "all" else f"{self.policy}({self.k})"


def sample_frames(n_frames: int | ShotArtifact, policy: FrameSampling) -> list[int]:
    """Frame indices to inspect.

    ``keyframes(k)`` keeps the first and last frame plus ``k - 2`` evenly
    spaced interior frames; ``uniform(k)`` takes the centre of ``k`` equal bins.
    """
    n = n_frames.n_frames if isinstance(n_frames, ShotArtifact) else int(n_frames)
    if n < 1:
        raise ValueError("no frames to sample")
    if n == 1:
        return [0]
    if policy.policy == "all" or policy.k >= n:
        return list(range(n))
    k = policy.k
    if policy.policy == "keyframes":
        if k == 1:
            return [0]
        picks = [(j * (n - 1)) // (k - 1) for j in range(k)]
    else:
        picks = [((2 * j + 1) * n) // (2 * k) for j in range(k)]
    return sorted(set(picks))


# --- verification -----------------------------------------------------------------


class VlmClient(Protocol):
    def ask(self, prompt: str, images: Sequence[FrameRef]) -> str: ...


class Verifier(Protocol):
    def verify(self, artifact: ShotArtifact, shot: ShotSpec, store: MemoryStore) -> VerificationReport: ...


def script_description(shot: ShotSpec) -> str:
    if not shot.entities:
        return shot.prompt
    return f"{shot.prompt}\nCharacters: {', '.join(shot.entities)}"


def _identity_check(vlm: VlmClient, eid: str, portrait: FrameRef, frames: list[FrameRef]) -> Verdict:
    present = [f for f in frames if f.tokens and eid in f.tokens]
    for frame in present or frames:
        verdict = parse_verdict(vlm.ask(prompt("verifier_stage2"), [portrait, frame]))
        if not verdict.passed:
            return verdict
    return PASS


def verify(
    artifact: ShotArtifact,
    shot: ShotSpec,
    store: MemoryStore,
    vlm: VlmClient,
    sampling: FrameSampling = FrameSampling(),
    *,
    max_workers: int = 1,
) -> VerificationReport:
    """Semantic check per sampled frame, then identity check per entity."""
    idx = sample_frames(artifact, sampling)
    frames = [artifact.frame(i) for i in idx]

    stage1_prompt = prompt("verifier_stage1").replace("{script}", script_description(shot))
    semantic = PASS
    for frame in frames:
        semantic = parse_verdict(vlm.ask(stage1_prompt, [frame]))
        if not semantic.passed:
            break

    checks = []
    for eid in shot.entities:
        rec = store.records.get(eid)
        if rec is None:
            continue
        portrait = FrameRef(uri=rec.portrait_ref or f"gcm:{eid}", tokens={eid: appearance_token(rec.appearance_vec)})
        checks.append((eid, portrait))
    if max_workers > 1 and len(checks) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            verdicts = list(pool.map(lambda c: _identity_check(vlm, c[0], c[1], frames), checks))
    else:
        verdicts = [_identity_check(vlm, eid, p, frames) for eid, p in checks]
    identity = {eid: v for (eid, _), v in zip(checks, verdicts)}

    feedback = []
    if not semantic.passed:
        kind = classify_reason(semantic.reason, identity_stage=False)
        offending = tuple(e for e in shot.entities if re.search(rf"\b{re.escape(e)}\b", semantic.reason))
        feedback.append(Feedback(kind, semantic.reason, offending))
    for eid, v in identity.items():
        if not v.passed:
            feedback.append(Feedback(classify_reason(v.reason, identity_stage=True), v.reason, (eid,)))
    return VerificationReport(
        score=score_from_stages(semantic, identity),
        feedback=tuple(feedback),
        stage_semantic=semantic,
        stage_identity=identity,
    )


class VlmVerifier:
    """Adapts a chat-style VLM client to the report-level verifier contract."""

    def __init__(self, vlm: VlmClient, sampling: FrameSampling = FrameSampling(), max_workers: int = 1):
        self.vlm = vlm
        self.sampling = sampling
        self.max_workers = max_workers

    def verify(self, artifact: ShotArtifact, shot: ShotSpec, store: MemoryStore) -> VerificationReport:
        return verify(artifact, shot, store, self.vlm, self.sampling, max_workers=self.max_workers)


def apply_vcc(
    report: VerificationReport,
    artifact: ShotArtifact,
    shot: ShotSpec,
    store: MemoryStore,
    embed: FeatureExtractor,
    theta: float,
) -> VerificationReport:
    """Fold the feature-similarity gate into a verifier report."""
    records = [store.records[e] for e in shot.entities if e in store.records]
    vcc = vcc_check(artifact, records, embed, theta)
    if vcc.passed:
        return report
    identity = dict(report.stage_identity)
    feedback = list(report.feedback)
    for eid in vcc.failing:
        if eid in identity and not identity[eid].passed:
            continue
        reason = f"feature similarity {vcc.per_entity_similarity[eid]:.2f} below {theta:g}"
        identity[eid] = fail(reason)
        feedback.append(Feedback(FeedbackKind.APPEARANCE_INCONSISTENCY, reason, (eid,)))
    return VerificationReport(
        score=min(report.score, score_from_stages(report.stage_semantic, identity)),
        feedback=tuple(feedback),
        stage_semantic=report.stage_semantic,
        stage_identity=identity,
    )


# --- regeneration loop ----------------------------------------------------------------


@dataclass(frozen=True)
class AttemptRecord:
    """One synthesize-and-verify attempt. ``action`` is what preceded it."""

    attempt: int
    shot: ShotSpec
    mode: SynthesisMode
    seed: int
    artifact: ShotArtifact
    report: VerificationReport
    action: str | None = None

    @property
    def score(self) -> float:
        return self.report.score

    def log_entry(self) -> tuple[SynthesisMode, int, float, tuple[Feedback, ...]]:
        return (self.mode, self.seed, self.report.score, self.report.feedback)

    def to_dict(self) -> dict:
        return {
            "attempt": self.attempt,
            "shot": self.shot.to_dict(),
            "mode": self.mode.value,
            "seed": self.seed,
            "artifact": self.artifact.to_dict(),
            "report": self.report.to_dict(),
            "action": self.action,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttemptRecord":
        return cls(
            attempt=int(d["attempt"]),
            shot=ShotSpec.from_dict(d["shot"]),
            mode=SynthesisMode(d["mode"]),
            seed=int(d["seed"]),
            artifact=ShotArtifact.from_dict(d["artifact"]),
            report=VerificationReport.from_dict(d["report"]),
            action=d.get("action"),
        )


@dataclass(frozen=True)
class RegenOutcome:
    final_artifact: ShotArtifact
    attempts: int
    converged: bool
    attempt_log: tuple[AttemptRecord, ...]
    final_attempt: int

    @property
    def final_record(self) -> AttemptRecord:
        return self.attempt_log[self.final_attempt - 1]

    @property
    def score(self) -> float:
        return self.final_record.score

    @property
    def modes(self) -> list[SynthesisMode]:
        return [a.mode for a in self.attempt_log]

    @property
    def identity_ok(self) -> bool:
        return all(v.passed for v in self.final_record.report.stage_identity.values())


def settle(attempts: Sequence[AttemptRecord], tau: float) -> tuple[int, bool]:
    """Pick the accepted attempt: the last one if it passed, else the best score (earliest on ties)."""
    last = attempts[-1]
    if last.score >= tau:
        return last.attempt, True
    best = max(attempts, key=lambda a: (a.score, -a.attempt))
    return best.attempt, False


@dataclass
class LoopDeps:
    synth: SynthesisBackend
    verifier: Verifier
    planner: PlannerClient
    extractor: FeatureExtractor
    mode_params: Mapping[SynthesisMode, ModeParams] = field(default_factory=lambda: dict(DEFAULT_MODE_PARAMS))
    vcc_theta: float | None = None
    use_memory: bool = True
    alpha: float = DEFAULT_ALPHA
    registry: Collection[str] | None = None
    tally: Counter | None = None


def _assess(deps: LoopDeps, artifact: ShotArtifact, shot: ShotSpec, store: MemoryStore) -> VerificationReport:
    report = deps.verifier.verify(artifact, shot, store)
    if deps.vcc_theta is not None:
        report = apply_vcc(report, artifact, shot, store, deps.extractor, deps.vcc_theta)
    return report


def regen_loop(
    shot: ShotSpec,
    first_artifact: ShotArtifact | None,
    store: MemoryStore,
    deps: LoopDeps,
    tau: float = DEFAULT_TAU,
    max_retries: int = DEFAULT_MAX_RETRIES,
    flf2v_enabled: bool = True,
    *,
    request: SynthesisRequest,
    prev: ShotArtifact | None = None,
    prev_connect_to_next: bool = False,
    replay: Sequence[AttemptRecord] = (),
    on_attempt: Callable[[AttemptRecord, SynthesisRequest], None] | None = None,
) -> tuple[RegenOutcome, MemoryStore]:
    """Verify a shot and regenerate it until it passes or the budget runs out.

    Semantic feedback rewrites the shot through the planner; appearance or
    temporal feedback escalates the synthesis mode. One action per failed
    attempt, semantic first. Each retry uses the previous seed plus one. The
    memory store is updated from the accepted shot only when it converged.

    ``replay`` holds attempts already journaled by an interrupted run; they
    are reused verbatim instead of being executed again. ``first_artifact``
    may be None, in which case attempt 1 is synthesized from ``request``.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    if max_retries < 0:
        raise ValueError("max_retries must be non-negative")
    budget = max_retries + 1
    replay = list(replay)
    known = {r.entity_id: r for r in request.entity_records}

    def run_attempt(n: int, req: SynthesisRequest, action: str | None, art: ShotArtifact | None = None):
        if n <= len(replay):
            return replay[n - 1]
        if art is None:
            art = synthesize(req, deps.synth)
        rec = AttemptRecord(n, req.shot, req.mode, req.seed, art, _assess(deps, art, req.shot, store), action)
        if on_attempt is not None:
            on_attempt(rec, req)
        return rec

    current = run_attempt(1, request, None, first_artifact)
    attempts = [current]
    cur_shot, mode = current.shot, current.mode
    while current.score < tau and current.attempt < budget:
        n = current.attempt + 1
        if n <= len(replay):
            current = replay[n - 1]
            cur_shot, mode = current.shot, current.mode
            attempts.append(current)
            continue
        semantic = next((f for f in current.report.feedback if f.kind.is_semantic), None)
        appearance = next((f for f in current.report.feedback if f.kind.is_appearance), None)
        if semantic is not None:
            cur_shot = refine_semantic(cur_shot, semantic, deps.planner, registry=deps.registry)
            action = "refine"
        elif appearance is not None:
            mode = escalate_mode(mode, flf2v_enabled and bool(cur_shot.last_frame_prompt))
            action = "escalate"
        else:
            action = "resample"
        log.debug("shot %d attempt %d: %s -> %s", cur_shot.index, n, action, mode.value)
        req = build_request(
            cur_shot,
            mode,
            store,
            prev,
            deps.mode_params[mode],
            current.seed + 1,
            prev_connect_to_next=prev_connect_to_next,
            include_records=deps.use_memory,
            tally=deps.tally,
            known_records=list(known.values()),
        )
        known.update((r.entity_id, r) for r in req.entity_records)
        current = run_attempt(n, req, action)
        attempts.append(current)

    final_n, converged = settle(attempts, tau)
    final = attempts[final_n - 1]
    if converged and deps.use_memory:
        store = update_from_shot(store, final.artifact, deps.extractor, deps.alpha)
    outcome = RegenOutcome(
        final_artifact=final.artifact,
        attempts=len(attempts),
        converged=converged,
        attempt_log=tuple(attempts),
        final_attempt=final_n,
    )
    return outcome, store
