import pytest
from hypothesis import given, strategies as st

from storyloop.errors import TemplateBindError
from storyloop.pacing import (
    BUILTIN_TEMPLATES,
    CUT,
    MIN_SHOT_S,
    PacingTemplate,
    Segment,
    Transition,
    edit,
    resolve_template,
    retime,
)
from storyloop.synthesis import ShotArtifact, SynthesisMode


def art(i, dur):
    return ShotArtifact(i, SynthesisMode.T2V, 0, f"mock://shot{i}", ({"a": "x"},), dur)


def test_retime_trims_tail_only():
    e = retime(art(1, 5.0), 3.0)
    assert (e.in_point_s, e.out_point_s) == (0.0, 3.0)
    assert retime(art(1, 2.0), 4.0).out_point_s == 2.0


def test_retime_floor():
    with pytest.raises(ValueError):
        retime(art(1, 5.0), 0.5)


def test_fast_template_tiles():
    tl = edit([art(i, 5.0) for i in (3, 1, 2)], BUILTIN_TEMPLATES["fast"])
    assert [e.shot_index for e in tl.entries] == [1, 2, 3]
    assert [e.length_s for e in tl.entries] == [2.0, 2.0, 2.0]
    assert tl.total_duration_s == 6.0
    assert tl.entries[-1].transition is None
    assert all(e.transition == CUT for e in tl.entries[:-1])


def test_as_planned_uses_plan_durations():
    tl = edit([art(1, 5.0), art(2, 5.0)], resolve_template(None), planned_durations=[4.0, 2.5])
    assert [e.out_point_s for e in tl.entries] == [4.0, 2.5]


def test_crossfade_overlaps_subtract():
    tl = edit([art(1, 5.0), art(2, 5.0), art(3, 5.0)], BUILTIN_TEMPLATES["medium-crossfade"])
    assert tl.total_duration_s == pytest.approx(3 * 4.0 - 2 * 0.5)
    assert "crossfade(0.5)" in tl.to_edl()


def test_crossfade_too_long():
    tpl = PacingTemplate("x", (Segment(1, None, "fast"),), Transition("crossfade", 2.0))
    with pytest.raises(TemplateBindError):
        edit([art(1, 5.0), art(2, 5.0)], tpl)


def test_multi_segment_template():
    tpl = PacingTemplate("arc", (Segment(1, 2, "slow"), Segment(3, None, "fast", 1.5)))
    tl = edit([art(i, 8.0) for i in range(1, 5)], tpl)
    assert [e.length_s for e in tl.entries] == [6.0, 6.0, 1.5, 1.5]


@pytest.mark.parametrize(
    "segments",
    [
        (Segment(1, 2),),
        (Segment(1, 2), Segment(2, None)),
        (Segment(0, None),),
        (Segment(1, 9),),
    ],
)
def test_bind_rejects_bad_tilings(segments):
    with pytest.raises(TemplateBindError):
        PacingTemplate("bad", segments).bind(3)


def test_gapped_shot_numbers():
    with pytest.raises(TemplateBindError):
        edit([art(1, 3.0), art(3, 3.0)], BUILTIN_TEMPLATES["medium"])


def test_unknown_template():
    with pytest.raises(TemplateBindError):
        resolve_template("nope")


def test_template_round_trip():
    for tpl in BUILTIN_TEMPLATES.values():
        assert PacingTemplate.from_dict(tpl.to_dict()) == tpl
    assert Transition.from_dict("crossfade(0.25)") == Transition("crossfade", 0.25)


def test_transition_validation():
    for bad in (("wipe", 0.0), ("cut", 1.0), ("crossfade", 0.0)):
        with pytest.raises(ValueError):
            Transition(*bad)


@given(
    st.lists(st.floats(0.1, 20.0, allow_nan=False), min_size=1, max_size=12),
    st.sampled_from(sorted(BUILTIN_TEMPLATES)),
)
def test_timeline_invariants(durations, tid):
    shots = [art(i + 1, d) for i, d in enumerate(durations)]
    tpl = BUILTIN_TEMPLATES[tid]
    try:
        tl = edit(shots, tpl)
    except TemplateBindError:
        assert tpl.transition_default.kind == "crossfade"
        return
    assert [e.shot_index for e in tl.entries] == list(range(1, len(shots) + 1))
    for e, a in zip(tl.entries, shots):
        assert 0.0 == e.in_point_s <= e.out_point_s <= a.duration_s
        assert e.length_s == pytest.approx(min(a.duration_s, max(e.length_s, MIN_SHOT_S)))
    assert tl.total_duration_s <= sum(durations) + 1e-9


def test_worked_totals():
    tpl = PacingTemplate("four", (Segment(1, None, "medium", 4.0),))
    assert edit([art(i, 5.0) for i in (1, 2, 3)], tpl).total_duration_s == 12.0
    fade = PacingTemplate("fade", (Segment(1, None, "medium", 4.0),), Transition("crossfade", 0.5))
    assert edit([art(1, 4.0), art(2, 4.0)], fade).total_duration_s == 7.5
    with pytest.raises(TemplateBindError):
        edit([art(i, 5.0) for i in (1, 2, 3)], PacingTemplate("short", (Segment(1, 2),)))
