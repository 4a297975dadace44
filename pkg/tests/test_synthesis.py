from collections import Counter
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st
from jsonschema import Draft202012Validator

from oracles import MODE_TABLE
from storyloop.errors import BackendError, MissingAnchor, UnknownEntity
from storyloop.gcm import appearance_token, hash_to_unit_vector
from storyloop.resources import schema
from storyloop.synthesis import (
    DEFAULT_MODE_PARAMS,
    ShotArtifact,
    SynthesisMode,
    build_request,
    escalate_mode,
    goal_frame_for,
    request_to_wire,
    select_mode,
    synthesize,
    vcc_check,
)

T2V, FF2V, FLF2V = SynthesisMode.T2V, SynthesisMode.FF2V, SynthesisMode.FLF2V
WIRE = Draft202012Validator(schema("wire/synthesis_request.json"))


def test_default_params_match_table():
    for mode, (w, h, steps, ckpt) in MODE_TABLE.items():
        p = DEFAULT_MODE_PARAMS[SynthesisMode(mode)]
        assert (p.width, p.height, p.steps, p.checkpoint_id) == (w, h, steps, ckpt)


def test_mode_order():
    assert T2V < FF2V < FLF2V
    assert sorted([FLF2V, T2V, FF2V]) == [T2V, FF2V, FLF2V]


# --- selection policy table ------------------------------------------------------


def test_first_shot_is_t2v(golden_plan):
    assert select_mode(None, 0.9, 1.0, golden_plan.shot(1), True) is T2V
    assert select_mode(0.2, 0.9, 1.0, golden_plan.shot(1), True) is T2V


def test_disjoint_entities_is_t2v(golden_plan):
    assert select_mode(0.5, 0.9, 0.0, golden_plan.shot(2), True) is T2V


@pytest.mark.parametrize(
    "prev, expect",
    [(0.95, FF2V), (0.86, FF2V), (0.85, FF2V), (0.849, FLF2V), (0.5, FLF2V), (1.0, FF2V)],
)
def test_band_and_below(golden_plan, prev, expect):
    # shot 2 declares ff2v and carries a last_frame_prompt
    assert select_mode(prev, 0.9, 0.5, golden_plan.shot(2), True) is expect


def test_below_band_without_goal_prompt_falls_back(golden_plan):
    shot = replace(golden_plan.shot(2), last_frame_prompt=None)
    assert select_mode(0.3, 0.9, 0.5, shot, True) is FF2V


def test_flf2v_disabled(golden_plan):
    assert select_mode(0.3, 0.9, 0.5, golden_plan.shot(2), False) is FF2V
    assert select_mode(1.0, 0.9, 0.5, golden_plan.shot(3), False) is FF2V


def test_declared_flf2v_wins(golden_plan):
    assert select_mode(1.0, 0.9, 0.5, golden_plan.shot(3), True) is FLF2V


def test_strong_previous_follows_planner(golden_plan):
    shot = replace(golden_plan.shot(2), generation_mode="t2v")
    assert select_mode(1.0, 0.9, 0.5, shot, True) is T2V


def test_policy_rejects_bad_inputs(golden_plan):
    with pytest.raises(ValueError):
        select_mode(0.5, 0.0, 0.5, golden_plan.shot(2), True)
    with pytest.raises(ValueError):
        select_mode(0.5, 0.9, 1.5, golden_plan.shot(2), True)


@given(st.sampled_from([T2V, FF2V, FLF2V]), st.booleans())
def test_escalation_is_monotone(mode, enabled):
    up = escalate_mode(mode, enabled)
    assert mode <= up
    assert escalate_mode(FLF2V, enabled) is FLF2V
    if not enabled:
        assert up is not FLF2V or mode is FLF2V


# --- requests ----------------------------------------------------------------


def prev_artifact(index=1, tokens=None):
    tokens = tokens or {"student": "tok-s", "cat": "tok-c"}
    return ShotArtifact(index, T2V, 1, "mock://prev", (tokens, tokens), 0.125)


def test_build_request_anchor_and_goal(golden_plan, golden_store):
    shot = golden_plan.shot(3)
    tally = Counter()
    req = build_request(shot, FLF2V, golden_store, prev_artifact(2), DEFAULT_MODE_PARAMS[FLF2V], 9, tally=tally)
    assert [r.entity_id for r in req.entity_records] == ["student", "roommate"]
    assert req.first_frame_anchor.uri == "mock://prev#frame=1"
    assert req.goal_frame == goal_frame_for(shot)
    assert tally == {"student": 1, "roommate": 1}


def test_t2v_has_no_anchor(golden_plan, golden_store):
    req = build_request(golden_plan.shot(2), T2V, golden_store, prev_artifact(), DEFAULT_MODE_PARAMS[T2V], 1)
    assert req.first_frame_anchor is None and req.goal_frame is None


def test_missing_anchor(golden_plan, golden_store):
    with pytest.raises(MissingAnchor):
        build_request(golden_plan.shot(2), FF2V, golden_store, None, DEFAULT_MODE_PARAMS[FF2V], 1, prev_connect_to_next=True)


def test_unknown_entity(golden_plan, golden_store):
    shot = replace(golden_plan.shot(1), entities=("student", "dragon"))
    with pytest.raises(UnknownEntity):
        build_request(shot, T2V, golden_store, None, DEFAULT_MODE_PARAMS[T2V], 1)


def test_records_can_be_omitted(golden_plan, golden_store):
    req = build_request(golden_plan.shot(1), T2V, golden_store, None, DEFAULT_MODE_PARAMS[T2V], 1, include_records=False)
    assert req.entity_records == ()


def test_known_records_skip_lookups(golden_plan, golden_store):
    tally = Counter()
    first = build_request(golden_plan.shot(1), T2V, golden_store, None, DEFAULT_MODE_PARAMS[T2V], 1, tally=tally)
    build_request(golden_plan.shot(1), FF2V, golden_store, prev_artifact(), DEFAULT_MODE_PARAMS[FF2V], 2, tally=tally, known_records=first.entity_records)
    assert tally == {"student": 1, "cat": 1}


@given(st.sampled_from([T2V, FF2V, FLF2V]), st.integers(1, 4), st.integers(0, 2**62))
def test_every_request_matches_wire_schema(golden_plan, golden_store, mode, index, seed):
    shot = golden_plan.shot(index)
    if mode is FLF2V and not shot.last_frame_prompt:
        shot = replace(shot, last_frame_prompt="goal")
    prev = prev_artifact() if mode is not T2V else None
    req = build_request(shot, mode, golden_store, prev, DEFAULT_MODE_PARAMS[mode], seed)
    body = request_to_wire(req)
    assert not list(WIRE.iter_errors(body))
    if mode is FLF2V:
        assert body["first_frame"] and body["last_frame"]


def test_synthesize_checks_artifact(golden_plan, golden_store):
    req = build_request(golden_plan.shot(1), T2V, golden_store, None, DEFAULT_MODE_PARAMS[T2V], 5)

    class Wrong:
        def generate(self, request):
            return ShotArtifact(1, FF2V, 5, "x", ({},), 1.0)

    with pytest.raises(BackendError):
        synthesize(req, Wrong())


# --- consistency gate --------------------------------------------------------------


def test_vcc_passes_canonical_tokens(golden_store, extractor):
    recs = [golden_store.records["cat"]]
    tok = appearance_token(recs[0].appearance_vec)
    art = ShotArtifact(4, T2V, 1, "m", ({"cat": tok},) * 3, 1.0)
    report = vcc_check(art, recs, extractor, 0.85)
    assert report.passed and report.per_entity_similarity["cat"] > 0.99


def test_vcc_takes_minimum_and_flags_absent(golden_store, extractor):
    recs = [golden_store.records["cat"], golden_store.records["student"]]
    good = appearance_token(recs[0].appearance_vec)
    art = ShotArtifact(4, T2V, 1, "m", ({"cat": good}, {"cat": "rnd:0000beef"}), 1.0)
    report = vcc_check(art, recs, extractor, 0.85)
    expect = max(0.0, min(1.0, sum(a * b for a, b in zip(recs[0].appearance_vec, hash_to_unit_vector(b"rnd:0000beef")))))
    assert report.per_entity_similarity["cat"] == pytest.approx(expect)
    assert report.per_entity_similarity["student"] == 0.0
    assert set(report.failing) == {"cat", "student"}
