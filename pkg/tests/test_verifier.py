from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import keyframe_indices
from storyloop.backends.mock import MockVerifier, SymbolicVlm, mock_synthesize
from storyloop.errors import VerdictParseError
from storyloop.feedback import FeedbackKind
from storyloop.resources import prompt
from storyloop.synthesis import DEFAULT_MODE_PARAMS, SynthesisMode, build_request
from storyloop.verifier import (
    PASS,
    FrameSampling,
    VerificationReport,
    Verdict,
    apply_vcc,
    classify_reason,
    fail,
    parse_verdict,
    sample_frames,
    score_from_stages,
    verify,
)

T2V = SynthesisMode.T2V


@pytest.mark.parametrize(
    "text, passed, reason",
    [
        ("PASS", True, ""),
        ("pass.", True, ""),
        ("**PASS**", True, ""),
        ("FAIL: hair is blue", False, "hair is blue"),
        ("  **FAIL** - missing cat", False, "missing cat"),
        ("fail", False, "unspecified"),
    ],
)
def test_parse_verdict(text, passed, reason):
    v = parse_verdict(text)
    assert v.passed is passed and v.reason == reason


@pytest.mark.parametrize("text", ["", "Looks fine to me", "PASSABLE", "<<malformed response>>"])
def test_parse_verdict_rejects(text):
    with pytest.raises(VerdictParseError):
        parse_verdict(text)


def test_score_weights():
    assert score_from_stages(PASS, {}) == 1.0
    assert score_from_stages(fail("x"), {}) == 0.5
    assert score_from_stages(PASS, {"a": PASS, "b": fail("y")}) == 0.75
    assert score_from_stages(fail("x"), {"a": fail("y")}) == 0.0


@given(st.booleans(), st.lists(st.booleans(), max_size=6))
def test_score_in_unit_interval(sem, ids):
    identity = {str(i): PASS if ok else fail("x") for i, ok in enumerate(ids)}
    s = score_from_stages(PASS if sem else fail("x"), identity)
    assert 0.0 <= s <= 1.0
    assert (s == 1.0) == (sem and all(ids))


@pytest.mark.parametrize(
    "reason, identity, kind",
    [
        ("missing character cat", False, FeedbackKind.MISSING_ENTITY),
        ("character not present in frame", True, FeedbackKind.MISSING_ENTITY),
        ("flicker between frames", True, FeedbackKind.TEMPORAL_DISCONTINUITY),
        ("hair color differs", True, FeedbackKind.APPEARANCE_INCONSISTENCY),
        ("wrong room", False, FeedbackKind.SEMANTIC_MISMATCH),
    ],
)
def test_classify_reason(reason, identity, kind):
    assert classify_reason(reason, identity_stage=identity) is kind


def test_keyframes_of_48():
    assert sample_frames(48, FrameSampling("keyframes", 4)) == [0, 15, 31, 47]


@given(st.integers(1, 500), st.integers(2, 12))
def test_keyframes_match_oracle(n, k):
    got = sample_frames(n, FrameSampling("keyframes", k))
    if n == 1:
        assert got == [0]
    elif k >= n:
        assert got == list(range(n))
    else:
        assert got == keyframe_indices(n, k)
        assert got[0] == 0 and got[-1] == n - 1


@given(st.integers(1, 300), st.integers(1, 10))
def test_uniform_sampling_in_range(n, k):
    got = sample_frames(n, FrameSampling("uniform", k))
    assert got == sorted(set(got)) and all(0 <= i < n for i in got)


def test_sampling_spec_parse():
    assert FrameSampling.parse("keyframes(4)") == FrameSampling("keyframes", 4)
    assert str(FrameSampling.parse("all")) == "all"
    with pytest.raises(ValueError):
        FrameSampling.parse("every(2)")


# --- two-stage check against the symbolic VLM -------------------------------------------


def render(golden_plan, golden_store, world, index=1, records=True):
    shot = golden_plan.shot(index)
    req = build_request(shot, T2V, golden_store, None, DEFAULT_MODE_PARAMS[T2V], 3, include_records=records)
    return shot, mock_synthesize(world, req)


def test_consistent_shot_passes(golden_plan, golden_store, world):
    shot, art = render(golden_plan, golden_store, world)
    vlm = SymbolicVlm()
    report = verify(art, shot, golden_store, vlm)
    assert report.score == 1.0 and report.passed
    stage1 = [c for c in vlm.calls if c[0].startswith("Act as")]
    assert len(stage1) == 4
    assert "Script Description: " + shot.prompt in stage1[0][0]
    assert stage1[0][0].startswith(prompt("verifier_stage1").split("{script}")[0])


def test_identity_failure_without_memory(golden_plan, golden_store, world):
    shot, art = render(golden_plan, golden_store, world, records=False)
    report = verify(art, shot, golden_store, SymbolicVlm())
    assert report.stage_semantic.passed
    assert set(report.stage_identity) == {"student", "cat"}
    assert not any(v.passed for v in report.stage_identity.values())
    assert report.score == 0.5
    assert {f.kind for f in report.feedback} == {FeedbackKind.APPEARANCE_INCONSISTENCY}


def test_missing_entity_reported(golden_plan, golden_store, world):
    shot, art = render(golden_plan, golden_store, world)
    stripped = replace(art, frame_meta=tuple({k: v for k, v in f.items() if k != "cat"} for f in art.frame_meta))
    report = verify(stripped, shot, golden_store, SymbolicVlm())
    kinds = [f.kind for f in report.feedback]
    assert kinds[0] is FeedbackKind.MISSING_ENTITY
    assert report.feedback[0].offending_entities == ("cat",)


def test_stage_one_stops_at_first_failure(golden_plan, golden_store, world):
    shot, art = render(golden_plan, golden_store, world)
    art = replace(art, content_digest="0" * 16)
    vlm = SymbolicVlm()
    report = verify(art, shot, golden_store, vlm)
    assert report.feedback[0].kind is FeedbackKind.SEMANTIC_MISMATCH
    assert sum(1 for c in vlm.calls if c[0].startswith("Act as")) == 1


def test_parallel_identity_matches_serial(golden_plan, golden_store, world):
    shot, art = render(golden_plan, golden_store, world, index=2, records=False)
    a = verify(art, shot, golden_store, SymbolicVlm(), max_workers=1)
    b = verify(art, shot, golden_store, SymbolicVlm(), max_workers=4)
    assert a == b


def test_vlm_and_world_verifiers_agree(golden_plan, golden_store, world):
    for records in (True, False):
        for i in (1, 2, 3, 4):
            shot, art = render(golden_plan, golden_store, world, index=i, records=records)
            a = verify(art, shot, golden_store, SymbolicVlm(), FrameSampling("all", 0))
            b = MockVerifier(world).verify(art, shot, golden_store)
            assert a.score == b.score


def test_vcc_folds_into_report(golden_plan, golden_store, world, extractor):
    shot, art = render(golden_plan, golden_store, world, records=False)
    base = VerificationReport(1.0, (), PASS, {"student": PASS, "cat": PASS})
    out = apply_vcc(base, art, shot, golden_store, extractor, 0.85)
    assert out.score == 0.5
    assert all(f.kind is FeedbackKind.APPEARANCE_INCONSISTENCY for f in out.feedback)
    shot, good = render(golden_plan, golden_store, world)
    assert apply_vcc(base, good, shot, golden_store, extractor, 0.85) is base


def test_report_round_trip():
    r = VerificationReport(0.75, (), PASS, {"a": Verdict(False, "x")})
    assert VerificationReport.from_dict(r.to_dict()) == r
    with pytest.raises(ValueError):
        VerificationReport(1.5)
