"""Run directory, journal, resume and manifest behaviour."""

import json
import math
from collections import Counter

import httpx
import pytest

from conftest import GOLDEN, golden_config, mock_deps
from storyloop import canonical
from storyloop.backends.mock import ScriptedVerifier
from storyloop.errors import JournalCorrupt, PlanPhaseError, ShotPhaseError
from storyloop.pipeline import (
    JOURNAL,
    Journal,
    RunConfig,
    RunState,
    build_deps,
    compute_stats,
    inspect_run,
    load_state,
    make_run_id,
    read_journal,
    replay_shot,
    resume,
    run,
)


class Killed(BaseException):
    """Stands in for a crash: escapes every ``except Exception``."""


def kill_after(kind, **match):
    def hook(record):
        if record["type"] == kind and all(record.get(k) == v for k, v in match.items()):
            raise Killed(record["seq"])

    return hook


def tree(run_dir):
    skip = {JOURNAL, ".lock"}
    return {
        str(p.relative_to(run_dir)): p.read_bytes()
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def records(run_dir):
    return read_journal(run_dir / JOURNAL)


@pytest.fixture()
def baseline(tmp_path, idea, golden_plan, world):
    d = tmp_path / "baseline"
    m = run(idea, golden_config(), None, d)
    return d, m


# --- happy path --------------------------------------------------------------------


def test_happy_path(baseline, golden_plan):
    d, m = baseline
    assert m.status == "done" and not m.degraded
    assert [s["mode_used"] for s in m.shots] == ["T2V", "FF2V", "FLF2V", "T2V"]
    assert m.attempts == [1, 1, 1, 1]
    assert all(s["identity_ok"] for s in m.shots)
    for name in ("plan.json", "timeline.json", "timeline.edl", "manifest.json", "gcm/step_0.json", "gcm/step_4.json"):
        assert (d / name).is_file(), name
    assert (d / "plan.json").read_bytes() == GOLDEN.read_bytes()
    for i in range(1, 5):
        assert sorted(p.name for p in (d / "shots" / str(i) / "attempt_1").iterdir()) == [
            "artifact.json",
            "request.json",
            "verify.json",
        ]
    kinds = [r["type"] for r in records(d)]
    assert kinds == ["run_started", "planned", "registered"] + ["attempt", "shot_done"] * 4 + ["edited", "done"]


def test_same_seed_same_bytes(tmp_path, idea, baseline):
    d, _ = baseline
    again = tmp_path / "again"
    run(idea, golden_config(), None, again)
    assert tree(d) == tree(again)
    strip = lambda rs: [{k: v for k, v in r.items()} for r in rs]
    assert strip(records(d)) == strip(records(again))


def test_seed_changes_run_id_only_through_config(idea):
    a, b = golden_config(), golden_config(seed=43)
    assert make_run_id(idea, a) == make_run_id(idea, a)
    assert make_run_id(idea, a) != make_run_id(idea, b)
    assert len(make_run_id(idea, a)) == 26


def test_journal_lines_are_committed(baseline):
    d, _ = baseline
    for line in (d / JOURNAL).read_bytes().splitlines():
        entry = json.loads(line)
        assert set(entry) == {"digest", "record", "wall_ts"}
        assert entry["digest"] == canonical.digest(entry["record"])


def test_manifest_stats_match_journal(baseline):
    d, m = baseline
    done = [r["outcome"] for r in records(d) if r["type"] == "shot_done"]
    assert m.stats == compute_stats(done)
    assert json.loads((d / "manifest.json").read_bytes()) == m.to_dict()


def test_lookups_bounded(tmp_path, idea, golden_plan, world):
    deps = mock_deps(golden_plan, world)
    run(idea, golden_config(), deps, tmp_path / "r")
    bound = Counter(e for s in golden_plan.shots for e in s.entities)
    assert all(deps.tally[e] <= bound[e] for e in deps.tally)
    assert sum(deps.tally.values()) <= sum(len(s.entities) for s in golden_plan.shots)


def test_memory_snapshots_advance(baseline):
    d, _ = baseline
    steps = [json.loads((d / "gcm" / f"step_{i}.json").read_bytes())["step_counter"] for i in range(5)]
    assert steps == [0, 1, 2, 3, 4]


# --- failures and degraded runs -------------------------------------------------------


def test_scripted_failure_escalates(tmp_path, idea, golden_plan, world):
    deps = mock_deps(golden_plan, world, ScriptedVerifier({2: ["fail:appearance", "pass"]}))
    m = run(idea, golden_config(), deps, tmp_path / "r")
    s2 = m.shots[1]
    assert s2["modes"] == ["FF2V", "FLF2V"] and s2["attempts"] == 2 and s2["converged"]
    assert m.attempts == [1, 2, 1, 1]
    assert m.stats["first_pass_rate"] == 0.75 and m.stats["mean_extra_turns"] == 1.0
    assert (tmp_path / "r" / "shots" / "2" / "attempt_2" / "verify.json").is_file()


def test_no_gcm_degrades(tmp_path, idea):
    m = run(idea, golden_config(gcm_enabled=False), None, tmp_path / "r")
    assert m.status == "degraded"
    assert not all(s["identity_ok"] for s in m.shots)


def test_always_fail(tmp_path, idea):
    m = run(idea, golden_config(mock={"plan_path": str(GOLDEN), "verifier": "always_fail"}), None, tmp_path / "r")
    assert m.attempts == [3, 3, 3, 3] and m.status == "degraded"
    assert m.stats["convergence_rate"] == 0.0 and m.stats["mean_extra_turns"] == 2.0


# --- statistics ---------------------------------------------------------------------


def test_compute_stats_worked_example():
    shots = [{"attempts": a, "converged": c} for a, c in [(1, True), (1, True), (2, True), (3, False)]]
    st = compute_stats(shots)
    assert st == {"first_pass_rate": 0.5, "mean_extra_turns": 1.5, "convergence_rate": 0.75, "n_shots": 4}
    # the two retried shots cost (2 - 1) + (3 - 1) extra turns
    assert st["mean_extra_turns"] == (1 + 2) / 2


def test_compute_stats_no_retries():
    st = compute_stats([{"attempts": 1, "converged": True}])
    assert st["mean_extra_turns"] is None and st["first_pass_rate"] == 1.0


def test_compute_stats_zero_budget():
    st = compute_stats([{"attempts": 1, "converged": False}, {"attempts": 1, "converged": True}])
    assert st["first_pass_rate"] == 0.5 and st["convergence_rate"] == 0.5


def test_compute_stats_empty():
    with pytest.raises(ValueError):
        compute_stats([])


# --- resume -------------------------------------------------------------------------


@pytest.mark.parametrize("k", [1, 2, 3])
def test_resume_after_shot(tmp_path, idea, baseline, k):
    d = tmp_path / "crash"
    with pytest.raises(Killed):
        run(idea, golden_config(), None, d, hook=kill_after("shot_done", shot=k))
    assert load_state(d).phase == f"shooting({k + 1})"
    m = resume(d)
    assert (d / "manifest.json").read_bytes() == (baseline[0] / "manifest.json").read_bytes()
    assert tree(d) == tree(baseline[0])
    assert [r["seq"] for r in records(d)] == list(range(len(records(d))))
    assert m.to_json() == baseline[1].to_json()


@pytest.mark.parametrize("kind", ["planned", "registered", "edited"])
def test_resume_after_phase(tmp_path, idea, baseline, kind):
    d = tmp_path / "crash"
    with pytest.raises(Killed):
        run(idea, golden_config(), None, d, hook=kill_after(kind))
    resume(d)
    assert tree(d) == tree(baseline[0])


def test_resume_mid_shot_reuses_attempts(tmp_path, idea, golden_plan, world):
    d = tmp_path / "r"
    deps = mock_deps(golden_plan, world, ScriptedVerifier({2: ["fail:appearance", "fail:semantic", "pass"]}))
    with pytest.raises(Killed):
        run(idea, golden_config(), deps, d, hook=kill_after("attempt", shot=2, attempt=2))
    before = len(deps.synth.calls)

    fresh = mock_deps(golden_plan, world, ScriptedVerifier({2: ["pass"]}))
    m = resume(d, fresh)
    # attempts 1 and 2 of shot 2 came from the journal; only attempt 3 and shots 3..4 ran
    assert len(fresh.synth.calls) == 3 and before == 3
    attempts = [(r["shot"], r["attempt"]) for r in records(d) if r["type"] == "attempt"]
    assert attempts == sorted(set(attempts))
    assert m.shots[1]["modes"] == ["FF2V", "FLF2V", "FLF2V"]

    uninterrupted = tmp_path / "u"
    run(idea, golden_config(), mock_deps(golden_plan, world, ScriptedVerifier({2: ["fail:appearance", "fail:semantic", "pass"]})), uninterrupted)
    assert tree(d) == tree(uninterrupted)


def test_resume_done_run_is_noop(baseline):
    d, m = baseline
    before = (d / JOURNAL).read_bytes()
    assert resume(d).to_json() == m.to_json()
    assert (d / JOURNAL).read_bytes() == before


def test_truncated_journal(baseline):
    d, _ = baseline
    data = (d / JOURNAL).read_bytes()
    cut = data.rstrip(b"\n").rfind(b"\n") + 1
    (d / JOURNAL).write_bytes(data[: cut + 10])
    with pytest.raises(JournalCorrupt) as ei:
        resume(d)
    assert ei.value.offset == cut


def test_tampered_journal(baseline):
    d, _ = baseline
    lines = (d / JOURNAL).read_bytes().splitlines(keepends=True)
    lines[2] = lines[2].replace(b'"registered"', b'"planned"')
    (d / JOURNAL).write_bytes(b"".join(lines))
    with pytest.raises(JournalCorrupt) as ei:
        read_journal(d / JOURNAL)
    assert ei.value.offset == len(lines[0]) + len(lines[1])


def test_journal_seq_gap(tmp_path):
    j = Journal(tmp_path / "j", fsync=False)
    j.append("run_started")
    j.seq = 5
    j.append("planned")
    with pytest.raises(JournalCorrupt):
        read_journal(tmp_path / "j")


def test_journal_must_start_with_run_started(tmp_path):
    Journal(tmp_path / "j", fsync=False).append("planned")
    with pytest.raises(JournalCorrupt):
        read_journal(tmp_path / "j")


def test_refuses_non_empty_dir(tmp_path, idea):
    (tmp_path / "stray").write_text("x")
    with pytest.raises(FileExistsError):
        run(idea, golden_config(), None, tmp_path)


def test_lock_excludes_second_process(baseline):
    from filelock import FileLock

    d, _ = baseline
    with FileLock(str(d / ".lock")):
        # filelock is re-entrant within a process, so probe from a child
        import subprocess
        import sys

        code = f"from storyloop.pipeline import resume; resume({str(d)!r})"
        proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
        assert proc.returncode != 0 and "RunLocked" in proc.stderr


def test_phase_errors_are_resumable(tmp_path, idea, golden_plan, world):
    from storyloop.backends.mock import ScriptedPlanner

    d = tmp_path / "r"
    deps = mock_deps(golden_plan, world)
    deps.planner = ScriptedPlanner(["not json", "still not json", "nope"])
    with pytest.raises(PlanPhaseError):
        run(idea, golden_config(), deps, d)
    assert records(d)[-1]["type"] == "phase_error"
    assert resume(d, mock_deps(golden_plan, world)).status == "done"


def test_shot_error_names_shot(tmp_path, idea, golden_plan, world):
    from storyloop.backends.faults import Fault, FaultPlan, with_faults

    d = tmp_path / "r"
    deps = mock_deps(golden_plan, world)
    deps.synth = with_faults(deps.synth, FaultPlan([Fault("generate", "timeout", when=lambda req: req.shot.index == 3)]))
    with pytest.raises(ShotPhaseError) as ei:
        run(idea, golden_config(), deps, d)
    assert ei.value.shot_index == 3
    assert load_state(d).phase == "shooting(3)"
    m = resume(d, mock_deps(golden_plan, world))
    assert m.status == "done"


def test_inspect_and_replay(tmp_path, idea, golden_plan, world):
    d = tmp_path / "r"
    run(idea, golden_config(mock={"plan_path": str(GOLDEN), "verifier": "always_fail"}), None, d)
    info = inspect_run(d)
    assert info["phase"] == "done" and [s["attempts"] for s in info["shots"]] == [3, 3, 3, 3]
    for i in range(1, 5):
        r = replay_shot(d, i)
        assert r["identical"] and r["replayed_attempts"] == 3
    with pytest.raises(ValueError):
        replay_shot(d, 9)


def test_run_state_phases(baseline):
    d, _ = baseline
    recs = records(d)
    phases = [RunState.from_records(recs[: n + 1]).phase for n in range(len(recs))]
    assert phases[0] == "planning" and phases[-1] == "done"
    assert "shooting(1)" in phases and "editing" in phases


# --- configuration -------------------------------------------------------------------


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize(
    "bad", [{"tau": 0.0}, {"max_retries": -1}, {"seed": -1}, {"backend": "cloud"}, {"sampling": "every(3)"}, {"mode_params": {"X": {}}}]
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        RunConfig.from_dict(bad)


def test_config_round_trip():
    cfg = golden_config(pacing_template_id="fast", mode_params={"FF2V": {"steps": 20}})
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.resolved_mode_params()["FF2V"].steps == 20


def test_real_backend_needs_endpoints():
    with pytest.raises(ValueError, match="embedder"):
        build_deps(RunConfig(backend="real"))


# --- real adapters end to end, and no secret leaks ------------------------------------


SECRET = "sk-live-9f8e7d6c5b4a"


@pytest.fixture()
def fake_services(monkeypatch, golden_bytes):
    monkeypatch.setenv("STORYLOOP_TEST_TOKEN", SECRET)
    seen = []

    def handler(request):
        assert request.headers["authorization"] == f"Bearer {SECRET}"
        seen.append(request.url.host)
        body = json.loads(request.content)
        path = request.url.path
        if path.endswith("/chat/completions"):
            text = golden_bytes.decode() if request.url.host == "planner.test" else "PASS"
            return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})
        if path.endswith("/images"):
            return httpx.Response(200, json={"image_uri": f"s3://img/{abs(hash(body['prompt'])) % 10**6}.png"})
        if path.endswith("/videos"):
            return httpx.Response(200, json={"video_uri": f"s3://vid/{body['seed']}.mp4", "frames": 32})
        if path.endswith("/embeddings"):
            return httpx.Response(200, json={"embedding": [1 / math.sqrt(64)] * 64})
        return httpx.Response(404)

    real_client = httpx.Client
    monkeypatch.setattr(httpx, "Client", lambda *a, **kw: real_client(transport=httpx.MockTransport(handler)))
    endpoints = {
        name: {"base_url": f"http://{name}.test/v1", "auth_token_ref": "STORYLOOP_TEST_TOKEN", "timeout_s": 5}
        for name in ("planner", "verifier", "synth", "embedder")
    }
    return endpoints, seen


def test_real_backend_run_leaks_no_secret(tmp_path, idea, fake_services):
    endpoints, seen = fake_services
    cfg = RunConfig.from_dict({"seed": 7, "backend": "real", "endpoints": endpoints, "fsync": False})
    d = tmp_path / "real"
    m = run(idea, cfg, None, d)
    assert m.status == "done" and m.attempts == [1, 1, 1, 1]
    assert {"planner.test", "verifier.test", "synth.test", "embedder.test"} <= set(seen)
    for p in d.rglob("*"):
        if p.is_file():
            assert SECRET.encode() not in p.read_bytes(), p
