"""Run orchestration: plan, register, shoot, edit, with a durable journal.

A run lives in its own directory::

    journal.ndjson          append-only transition log
    plan.json               accepted storyboard (canonical JSON)
    gcm/step_<i>.json       memory snapshot after registration (0) and after shot i
    shots/<i>/attempt_<a>/  request.json, artifact.json, verify.json
    timeline.json           edit decision list as JSON (plus timeline.edl)
    manifest.json           per-shot summary and statistics

Every file is written before the journal record that commits it, so a crash
between the two just repeats an idempotent write on resume.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

from filelock import FileLock, Timeout

from . import canonical
from .backends.http import BackendEndpoint
from .errors import (
    EditPhaseError,
    JournalCorrupt,
    PlanPhaseError,
    RunLocked,
    ShotPhaseError,
)
from .gcm import (
    DEFAULT_ALPHA,
    DEFAULT_DIM,
    FeatureExtractor,
    MemoryStore,
    SymbolicExtractor,
    entity_overlap,
    register,
    restore,
    snapshot,
)
from .pacing import PacingTemplate, Timeline, edit, resolve_template
from .seeds import shot_seed
from .storyboard import DEFAULT_MAX_SHOTS, Idea, PlannerClient, StoryboardPlan, plan, serialize_plan
from .synthesis import (
    DEFAULT_DELTA,
    DEFAULT_MODE_PARAMS,
    DEFAULT_VCC_THETA,
    ModeParams,
    ShotArtifact,
    SynthesisBackend,
    SynthesisMode,
    SynthesisRequest,
    build_request,
    select_mode,
)
from .verifier import (
    DEFAULT_MAX_RETRIES,
    DEFAULT_TAU,
    AttemptRecord,
    FrameSampling,
    LoopDeps,
    RegenOutcome,
    Verifier,
    regen_loop,
)

log = logging.getLogger(__name__)

JOURNAL = "journal.ndjson"
LOCK = ".lock"
MOCK_VERIFIERS = ("world", "vlm", "always_fail", "stochastic")


# --- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything that shapes a run. Serialized into the journal, so no secrets."""

    seed: int = 0
    tau: float = DEFAULT_TAU
    max_retries: int = DEFAULT_MAX_RETRIES
    flf2v_enabled: bool = True
    gcm_enabled: bool = True
    backend: str = "mock"
    endpoints: Mapping[str, BackendEndpoint] = field(default_factory=dict)
    mode_params: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    pacing_template_id: str | None = None
    pacing_templates: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    vcc_theta: float | None = DEFAULT_VCC_THETA
    delta_margin: float = DEFAULT_DELTA
    embed_dim: int = DEFAULT_DIM
    gcm_alpha: float = DEFAULT_ALPHA
    max_shots: int = DEFAULT_MAX_SHOTS
    fps: int = 16
    sampling: str = "keyframes(4)"
    mock: Mapping[str, Any] = field(default_factory=dict)
    fsync: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.backend not in ("mock", "real"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.vcc_theta is not None and not 0.0 < self.vcc_theta <= 1.0:
            raise ValueError("vcc_theta must lie in (0, 1]")
        if not 0.0 <= self.delta_margin < 1.0:
            raise ValueError("delta_margin must lie in [0, 1)")
        if not 0.0 <= self.gcm_alpha <= 1.0:
            raise ValueError("gcm_alpha must lie in [0, 1]")
        if self.embed_dim < 1 or self.max_shots < 1 or self.fps < 1:
            raise ValueError("embed_dim, max_shots and fps must be positive")
        FrameSampling.parse(self.sampling)
        for key in self.mode_params:
            SynthesisMode(key)
        verifier = self.mock.get("verifier", "world")
        if verifier not in MOCK_VERIFIERS:
            raise ValueError(f"unknown mock verifier {verifier!r}")

    def resolved_mode_params(self) -> dict[SynthesisMode, ModeParams]:
        out = dict(DEFAULT_MODE_PARAMS)
        for key, override in self.mode_params.items():
            mode = SynthesisMode(key)
            out[mode] = ModeParams.from_dict({**out[mode].to_dict(), **override})
        return out

    def extra_templates(self) -> dict[str, PacingTemplate]:
        return {k: PacingTemplate.from_dict({"template_id": k, **v}) for k, v in self.pacing_templates.items()}

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["endpoints"] = {k: e.to_dict() for k, e in self.endpoints.items()}
        d["mode_params"] = {k: dict(v) for k, v in self.mode_params.items()}
        d["pacing_templates"] = {k: dict(v) for k, v in self.pacing_templates.items()}
        d["mock"] = dict(self.mock)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(d)
        if "endpoints" in kw:
            kw["endpoints"] = {k: BackendEndpoint.from_dict(v) for k, v in kw["endpoints"].items()}
        return cls(**kw)


# --- journal ------------------------------------------------------------------


class Journal:
    """Append-only ndjson log of canonical records.

    Each line is ``{"digest", "record", "wall_ts"}``; the digest covers the
    record only, so wall-clock time never affects anything that is compared.
    """

    def __init__(self, path: Path, *, fsync: bool = True, hook: Callable[[dict], None] | None = None, seq: int = 0):
        self.path = Path(path)
        self.fsync = fsync
        self.hook = hook
        self.seq = seq

    def append(self, kind: str, **payload: Any) -> dict:
        record = {"seq": self.seq, "type": kind, **payload}
        line = canonical.dumps({"digest": canonical.digest(record), "record": record, "wall_ts": time.time()})
        with open(self.path, "ab") as fh:
            fh.write(line + b"\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        self.seq += 1
        if self.hook is not None:
            self.hook(record)
        return record


def read_journal(path: Path) -> list[dict]:
    data = Path(path).read_bytes()
    records = []
    offset = 0
    while offset < len(data):
        end = data.find(b"\n", offset)
        if end < 0:
            raise JournalCorrupt(offset, "truncated line (no newline)")
        try:
            entry = canonical.loads(data[offset:end])
            record = entry["record"]
            ok = entry["digest"] == canonical.digest(record)
        except (ValueError, KeyError, TypeError):
            raise JournalCorrupt(offset, "line is not a journal entry") from None
        if not ok:
            raise JournalCorrupt(offset, "digest mismatch")
        if record.get("seq") != len(records):
            raise JournalCorrupt(offset, f"expected seq {len(records)}, found {record.get('seq')}")
        records.append(record)
        offset = end + 1
    if not records or records[0].get("type") != "run_started":
        raise JournalCorrupt(0, "journal does not start with run_started")
    return records


# --- state ----------------------------------------------------------------------


@dataclass(frozen=True)
class ShotSummary:
    index: int
    mode_used: SynthesisMode
    modes: tuple[SynthesisMode, ...]
    attempts: int
    final_attempt: int
    score: float
    converged: bool
    identity_ok: bool
    artifact: ShotArtifact

    @property
    def degraded(self) -> bool:
        return not self.converged

    @classmethod
    def from_outcome(cls, index: int, outcome: RegenOutcome) -> "ShotSummary":
        return cls(
            index=index,
            mode_used=outcome.final_artifact.mode_used,
            modes=tuple(outcome.modes),
            attempts=outcome.attempts,
            final_attempt=outcome.final_attempt,
            score=outcome.score,
            converged=outcome.converged,
            identity_ok=outcome.identity_ok,
            artifact=outcome.final_artifact,
        )

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "mode_used": self.mode_used.value,
            "modes": [m.value for m in self.modes],
            "attempts": self.attempts,
            "final_attempt": self.final_attempt,
            "score": self.score,
            "converged": self.converged,
            "identity_ok": self.identity_ok,
            "artifact": self.artifact.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShotSummary":
        return cls(
            index=int(d["index"]),
            mode_used=SynthesisMode(d["mode_used"]),
            modes=tuple(SynthesisMode(m) for m in d["modes"]),
            attempts=int(d["attempts"]),
            final_attempt=int(d["final_attempt"]),
            score=float(d["score"]),
            converged=bool(d["converged"]),
            identity_ok=bool(d["identity_ok"]),
            artifact=ShotArtifact.from_dict(d["artifact"]),
        )


@dataclass
class RunState:
    """What the journal says has happened so far."""

    run_id: str
    idea: Idea
    config: RunConfig
    plan: StoryboardPlan | None = None
    store: MemoryStore | None = None
    shots: dict[int, ShotSummary] = field(default_factory=dict)
    pending: dict[int, list[tuple[AttemptRecord, SynthesisRequest]]] = field(default_factory=dict)
    snapshots: dict[int, MemoryStore] = field(default_factory=dict)
    timeline: Timeline | None = None
    manifest: dict | None = None
    clock: int = 0

    @property
    def phase(self) -> str:
        if self.manifest is not None:
            return "done"
        if self.plan is None:
            return "planning"
        if self.timeline is None and len(self.shots) < len(self.plan.shots):
            return f"shooting({len(self.shots) + 1})"
        return "editing"

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "RunState":
        head = records[0]
        state = cls(head["run_id"], Idea.from_dict(head["idea"]), RunConfig.from_dict(head["config"]))
        for rec in records[1:]:
            kind = rec["type"]
            if kind == "planned":
                state.plan = StoryboardPlan.from_dict(rec["plan"])
            elif kind == "registered":
                state.store = restore(canonical.dumps(rec["snapshot"]))
                state.snapshots[0] = state.store
            elif kind == "attempt":
                pair = (AttemptRecord.from_dict(rec["record"]), SynthesisRequest.from_dict(rec["request"]))
                state.pending.setdefault(rec["shot"], []).append(pair)
            elif kind == "shot_done":
                i = rec["shot"]
                state.shots[i] = ShotSummary.from_dict(rec["outcome"])
                state.store = restore(canonical.dumps(rec["snapshot"]))
                state.snapshots[i] = state.store
                state.pending.pop(i, None)
                state.clock = i
            elif kind == "edited":
                state.timeline = _timeline_from_dict(rec["timeline"])
            elif kind == "done":
                state.manifest = rec["manifest"]
        return state


def _timeline_from_dict(d: dict) -> Timeline:
    from .pacing import TimelineEntry, Transition

    return Timeline(
        tuple(
            TimelineEntry(
                e["shot_index"],
                e["artifact_ref"],
                e["in_point_s"],
                e["out_point_s"],
                Transition.from_dict(e["transition"]) if e["transition"] else None,
            )
            for e in d["entries"]
        )
    )


def load_state(run_dir: str | os.PathLike) -> RunState:
    return RunState.from_records(read_journal(Path(run_dir) / JOURNAL))


# --- statistics ---------------------------------------------------------------------


def compute_stats(per_shot: Sequence[Any]) -> dict:
    """First-pass rate, mean extra turns over retried shots, convergence rate.

    ``mean_extra_turns`` is None when no shot needed a retry.
    """
    if not per_shot:
        raise ValueError("no shots to summarize")

    def get(s, key):
        return s[key] if isinstance(s, Mapping) else getattr(s, key)

    attempts = [int(get(s, "attempts")) for s in per_shot]
    converged = [bool(get(s, "converged")) for s in per_shot]
    n = len(per_shot)
    retried = [a - 1 for a in attempts if a > 1]
    # with a zero retry budget a failed shot also stops at one attempt
    first = sum(a == 1 and c for a, c in zip(attempts, converged))
    return {
        "first_pass_rate": float(Fraction(first, n)),
        "mean_extra_turns": float(Fraction(sum(retried), len(retried))) if retried else None,
        "convergence_rate": float(Fraction(sum(converged), n)),
        "n_shots": n,
    }


# --- manifest -----------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    plan_digest: str
    shots: tuple[dict, ...]
    timeline_ref: str
    timeline_digest: str
    stats: dict
    status: str

    @property
    def degraded(self) -> bool:
        return self.status == "degraded"

    @property
    def attempts(self) -> list[int]:
        return [s["attempts"] for s in self.shots]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "plan_digest": self.plan_digest,
            "shots": list(self.shots),
            "timeline_ref": self.timeline_ref,
            "timeline_digest": self.timeline_digest,
            "stats": self.stats,
            "status": self.status,
        }

    def to_json(self) -> bytes:
        return canonical.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            d["run_id"], d["plan_digest"], tuple(d["shots"]), d["timeline_ref"], d["timeline_digest"], d["stats"], d["status"]
        )


def _manifest(state: RunState, timeline: Timeline) -> RunManifest:
    summaries = [state.shots[i] for i in sorted(state.shots)]
    shots = tuple(
        {
            "index": s.index,
            "mode_used": s.mode_used.value,
            "modes": [m.value for m in s.modes],
            "attempts": s.attempts,
            "final_attempt": s.final_attempt,
            "score": s.score,
            "converged": s.converged,
            "degraded": s.degraded,
            "identity_ok": s.identity_ok,
            "artifact_ref": s.artifact.video_ref,
        }
        for s in summaries
    )
    return RunManifest(
        run_id=state.run_id,
        plan_digest=canonical.digest(state.plan.to_dict()),
        shots=shots,
        timeline_ref="timeline.json",
        timeline_digest=hashlib.sha256(timeline.to_json()).hexdigest(),
        stats=compute_stats(summaries),
        status="degraded" if any(s.degraded for s in summaries) else "done",
    )


# --- dependencies -------------------------------------------------------------------


@dataclass
class RunDeps:
    planner: PlannerClient
    synth: SynthesisBackend
    verifier: Verifier
    extractor: FeatureExtractor
    tally: Counter = field(default_factory=Counter)


def build_mock_deps(config: RunConfig, plan_override: StoryboardPlan | None = None) -> RunDeps:
    from .backends.mock import (
        ConstantVerifier,
        MockPlanner,
        MockSynthesisBackend,
        MockVerifier,
        MockWorld,
        StochasticVerifier,
        SymbolicVlm,
    )
    from .storyboard import parse_plan_json
    from .verifier import VlmVerifier

    world = MockWorld(seed=config.seed, fps=config.fps)
    opts = config.mock
    plan_obj = plan_override
    if plan_obj is None and opts.get("plan_path"):
        plan_obj = parse_plan_json(Path(opts["plan_path"]).read_bytes(), max_shots=config.max_shots)
    kind = opts.get("verifier", "world")
    if kind == "world":
        verifier: Verifier = MockVerifier(world)
    elif kind == "vlm":
        verifier = VlmVerifier(SymbolicVlm(), FrameSampling.parse(config.sampling))
    elif kind == "always_fail":
        verifier = ConstantVerifier(opts.get("verdict", "fail:appearance"))
    else:
        verifier = StochasticVerifier(float(opts.get("p1", 0.72)), float(opts.get("q", 0.6)), config.seed)
    return RunDeps(MockPlanner(plan_obj), MockSynthesisBackend(world), verifier, SymbolicExtractor(config.embed_dim))


def build_real_deps(config: RunConfig) -> RunDeps:
    from .backends.http import HttpEmbedder, HttpPlanner, HttpSynthesisBackend, HttpVlm
    from .verifier import VlmVerifier

    missing = [k for k in ("planner", "verifier", "synth", "embedder") if k not in config.endpoints]
    if missing:
        raise ValueError(f"real backend needs endpoints: {', '.join(missing)}")
    ep = config.endpoints
    return RunDeps(
        HttpPlanner(ep["planner"]),
        HttpSynthesisBackend(ep["synth"]),
        VlmVerifier(HttpVlm(ep["verifier"]), FrameSampling.parse(config.sampling)),
        HttpEmbedder(ep["embedder"], config.embed_dim),
    )


def build_deps(config: RunConfig) -> RunDeps:
    return build_mock_deps(config) if config.backend == "mock" else build_real_deps(config)


# --- running --------------------------------------------------------------------------

_CROCKFORD = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"


def make_run_id(idea: Idea, config: RunConfig) -> str:
    """26-character Crockford base32 id; a pure function of the run inputs."""
    h = hashlib.sha256(canonical.dumps({"idea": idea.to_dict(), "config": config.to_dict()})).digest()
    n = int.from_bytes(h[:17], "big") >> 6
    return "".join(_CROCKFORD[(n >> (5 * k)) & 31] for k in reversed(range(26)))


def _write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@contextmanager
def _locked(run_dir: Path) -> Iterator[None]:
    lock = FileLock(str(run_dir / LOCK), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise RunLocked(f"{run_dir} is in use by another process") from None
    try:
        yield
    finally:
        lock.release()


def run(
    idea: Idea,
    config: RunConfig,
    deps: RunDeps | None,
    run_dir: str | os.PathLike,
    *,
    hook: Callable[[dict], None] | None = None,
) -> RunManifest:
    """Execute a fresh run in an empty (or absent) directory."""
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        raise FileExistsError(f"{run_dir} is not empty; use resume")
    run_dir.mkdir(parents=True, exist_ok=True)
    deps = deps or build_deps(config)
    with _locked(run_dir):
        journal = Journal(run_dir / JOURNAL, fsync=config.fsync, hook=hook)
        run_id = make_run_id(idea, config)
        journal.append("run_started", run_id=run_id, idea=idea.to_dict(), config=config.to_dict())
        state = RunState(run_id, idea, config)
        return _drive(run_dir, state, deps, journal)


def resume(
    run_dir: str | os.PathLike,
    deps: RunDeps | None = None,
    *,
    hook: Callable[[dict], None] | None = None,
) -> RunManifest:
    """Continue a run from the first step its journal has not committed."""
    run_dir = Path(run_dir)
    with _locked(run_dir):
        records = read_journal(run_dir / JOURNAL)
        state = RunState.from_records(records)
        if state.manifest is not None:
            return RunManifest.from_dict(state.manifest)
        journal = Journal(run_dir / JOURNAL, fsync=state.config.fsync, hook=hook, seq=len(records))
        return _drive(run_dir, state, deps or build_deps(state.config), journal)


def _loop_deps(state: RunState, deps: RunDeps) -> LoopDeps:
    cfg = state.config
    return LoopDeps(
        synth=deps.synth,
        verifier=deps.verifier,
        planner=deps.planner,
        extractor=deps.extractor,
        mode_params=cfg.resolved_mode_params(),
        vcc_theta=cfg.vcc_theta,
        use_memory=cfg.gcm_enabled,
        alpha=cfg.gcm_alpha,
        registry=tuple(state.plan.registry),
        tally=deps.tally,
    )


def _first_request(state: RunState, index: int, deps: RunDeps) -> SynthesisRequest:
    cfg = state.config
    shot = state.plan.shot(index)
    prev_spec = state.plan.shot(index - 1) if index > 1 else None
    prev = state.shots.get(index - 1)
    overlap = entity_overlap(prev_spec.entities, shot.entities) if prev_spec else 0.0
    mode = select_mode(
        prev.score if prev else None, cfg.tau, overlap, shot, cfg.flf2v_enabled, delta=cfg.delta_margin
    )
    return build_request(
        shot,
        mode,
        state.store,
        prev.artifact if prev else None,
        cfg.resolved_mode_params()[mode],
        shot_seed(cfg.seed, index),
        prev_connect_to_next=prev_spec.connect_to_next if prev_spec else False,
        include_records=cfg.gcm_enabled,
        tally=deps.tally,
    )


def _shoot(
    run_dir: Path,
    state: RunState,
    index: int,
    deps: RunDeps,
    *,
    replay: Sequence[tuple[AttemptRecord, SynthesisRequest]] = (),
    on_attempt: Callable[[AttemptRecord, SynthesisRequest], None] | None = None,
) -> tuple[RegenOutcome, MemoryStore]:
    cfg = state.config
    shot = state.plan.shot(index)
    prev_spec = state.plan.shot(index - 1) if index > 1 else None
    prev = state.shots.get(index - 1)
    request = replay[0][1] if replay else _first_request(state, index, deps)
    return regen_loop(
        shot,
        None,
        state.store,
        _loop_deps(state, deps),
        cfg.tau,
        cfg.max_retries,
        cfg.flf2v_enabled,
        request=request,
        prev=prev.artifact if prev else None,
        prev_connect_to_next=prev_spec.connect_to_next if prev_spec else False,
        replay=[r for r, _ in replay],
        on_attempt=on_attempt,
    )


def _attempt_files(run_dir: Path, rec: AttemptRecord, req: SynthesisRequest) -> None:
    d = run_dir / "shots" / str(rec.shot.index) / f"attempt_{rec.attempt}"
    _write(d / "request.json", canonical.dumps(req.to_dict()))
    _write(d / "artifact.json", canonical.dumps(rec.artifact.to_dict()))
    _write(d / "verify.json", canonical.dumps(rec.report.to_dict()))


def _drive(run_dir: Path, state: RunState, deps: RunDeps, journal: Journal) -> RunManifest:
    cfg = state.config

    if state.plan is None:
        try:
            p = plan(state.idea, deps.planner, max_shots=cfg.max_shots)
        except Exception as e:
            journal.append("phase_error", phase="planning", error=str(e))
            raise PlanPhaseError(f"planning failed: {e}") from e
        _write(run_dir / "plan.json", serialize_plan(p))
        journal.append("planned", plan=p.to_dict())
        state.plan = p

    if state.store is None:
        try:
            store = MemoryStore(dim=cfg.embed_dim)
            for decl in state.plan.characters:
                portrait = deps.synth.render_portrait(decl, state.plan.style)
                store = register(store, decl, portrait, deps.extractor)
        except Exception as e:
            journal.append("phase_error", phase="registration", error=str(e))
            raise PlanPhaseError(f"character registration failed: {e}") from e
        snap = snapshot(store)
        _write(run_dir / "gcm" / "step_0.json", snap)
        journal.append("registered", snapshot=canonical.loads(snap))
        state.store = store
        state.snapshots[0] = store

    for shot in state.plan.shots:
        i = shot.index
        if i in state.shots:
            continue

        def on_attempt(rec: AttemptRecord, req: SynthesisRequest, i=i) -> None:
            _attempt_files(run_dir, rec, req)
            journal.append("attempt", shot=i, attempt=rec.attempt, request=req.to_dict(), record=rec.to_dict())

        try:
            outcome, store = _shoot(run_dir, state, i, deps, replay=state.pending.get(i, ()), on_attempt=on_attempt)
        except Exception as e:
            journal.append("phase_error", phase="shooting", shot=i, error=str(e))
            raise ShotPhaseError(i, e) from e
        summary = ShotSummary.from_outcome(i, outcome)
        snap = snapshot(store)
        _write(run_dir / "gcm" / f"step_{i}.json", snap)
        journal.append("shot_done", shot=i, outcome=summary.to_dict(), snapshot=canonical.loads(snap))
        state.shots[i] = summary
        state.store = store
        state.snapshots[i] = store
        state.pending.pop(i, None)
        state.clock = i
        if not summary.converged:
            log.warning("shot %d did not converge after %d attempts (score %.2f)", i, summary.attempts, summary.score)

    if state.timeline is None:
        try:
            template = resolve_template(cfg.pacing_template_id or state.idea.pacing_template_id, cfg.extra_templates())
            timeline = edit(
                [state.shots[i].artifact for i in sorted(state.shots)],
                template,
                planned_durations=[s.duration_s for s in state.plan.shots],
            )
        except Exception as e:
            journal.append("phase_error", phase="editing", error=str(e))
            raise EditPhaseError(f"editing failed: {e}") from e
        _write(run_dir / "timeline.json", timeline.to_json())
        _write(run_dir / "timeline.edl", timeline.to_edl())
        journal.append("edited", timeline=timeline.to_dict())
        state.timeline = timeline

    manifest = _manifest(state, state.timeline)
    _write(run_dir / "manifest.json", manifest.to_json())
    journal.append("done", manifest=manifest.to_dict())
    state.manifest = manifest.to_dict()
    return manifest


# --- debugging aids -------------------------------------------------------------------


def replay_shot(run_dir: str | os.PathLike, index: int, deps: RunDeps | None = None) -> dict:
    """Re-execute one shot's regeneration loop from journaled inputs.

    Nothing is written. The result reports whether every re-run attempt
    reproduced the journaled ``verify.json`` bytes.
    """
    run_dir = Path(run_dir)
    full = load_state(run_dir)
    if full.plan is None or not 1 <= index <= len(full.plan.shots):
        raise ValueError(f"shot {index} is not part of this run")
    records = read_journal(run_dir / JOURNAL)
    journaled = [
        (AttemptRecord.from_dict(r["record"]), SynthesisRequest.from_dict(r["request"]))
        for r in records
        if r["type"] == "attempt" and r["shot"] == index
    ]
    if not journaled:
        raise ValueError(f"shot {index} has no journaled attempts")

    state = RunState(full.run_id, full.idea, full.config, plan=full.plan)
    state.shots = {k: v for k, v in full.shots.items() if k < index}
    state.store = full.snapshots.get(index - 1)
    if state.store is None:
        raise ValueError(f"no memory snapshot precedes shot {index}")
    deps = deps or build_deps(full.config)

    seen: list[AttemptRecord] = []
    first_req = journaled[0][1]
    cfg = state.config
    prev_spec = state.plan.shot(index - 1) if index > 1 else None
    prev = state.shots.get(index - 1)
    regen_loop(
        state.plan.shot(index),
        None,
        state.store,
        _loop_deps(state, deps),
        cfg.tau,
        cfg.max_retries,
        cfg.flf2v_enabled,
        request=first_req,
        prev=prev.artifact if prev else None,
        prev_connect_to_next=prev_spec.connect_to_next if prev_spec else False,
        on_attempt=lambda rec, req: seen.append(rec),
    )
    matches = []
    for rec in seen:
        path = run_dir / "shots" / str(index) / f"attempt_{rec.attempt}" / "verify.json"
        matches.append(path.exists() and path.read_bytes() == canonical.dumps(rec.report.to_dict()))
    return {
        "shot": index,
        "journaled_attempts": len(journaled),
        "replayed_attempts": len(seen),
        "matches": matches,
        "identical": len(seen) == len(journaled) and all(matches),
    }


def inspect_run(run_dir: str | os.PathLike) -> dict:
    state = load_state(run_dir)
    shots = [
        {
            "index": s.index,
            "attempts": s.attempts,
            "modes": [m.value for m in s.modes],
            "score": s.score,
            "converged": s.converged,
        }
        for s in (state.shots[i] for i in sorted(state.shots))
    ]
    out = {"run_id": state.run_id, "phase": state.phase, "shots": shots}
    if shots:
        out["stats"] = compute_stats(list(state.shots.values()))
    return out


__all__ = [
    "Journal",
    "RunConfig",
    "RunDeps",
    "RunManifest",
    "RunState",
    "ShotSummary",
    "build_deps",
    "build_mock_deps",
    "build_real_deps",
    "compute_stats",
    "inspect_run",
    "load_state",
    "make_run_id",
    "read_journal",
    "replay_shot",
    "resume",
    "run",
]
