from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slukit.errors import DataError
from slukit.iob import EntityAnnotation, SemanticFrame
from slukit.scoring import normalize_value, score_corpus, score_entities, score_intent


def frame(intent, *ents):
    return SemanticFrame(intent, [EntityAnnotation(l, v.split()) for l, v in ents])


def paired(frames_ref, frames_hyp):
    refs = [(f"u{i}", f) for i, f in enumerate(frames_ref)]
    hyps = [(f"u{i}", f) for i, f in enumerate(frames_hyp)]
    return refs, hyps


def test_partial_value_is_both_fp_and_fn():
    refs, hyps = paired(
        [frame("flight", ("toloc.city_name", "new_york"))],
        [frame("flight", ("toloc.city_name", "york"))],
    )
    s = score_entities(refs, hyps)
    assert (s.tp, s.fp, s.fn) == (0, 1, 1)


def test_perfect_match_is_f1_one():
    fs = [
        frame("flight", ("fromloc.city_name", "boston"), ("toloc.city_name", "denver")),
        frame("airfare", ("airline.name", "united")),
    ]
    refs, hyps = paired(fs, fs)
    assert score_entities(refs, hyps).f1 == 1.0
    assert score_intent(refs, hyps).ier == 0.0


def test_half_overlap_by_hand():
    refs, hyps = paired(
        [frame("x", ("a.a", "x"), ("b.b", "y"))],
        [frame("x", ("a.a", "x"), ("c.c", "z"))],
    )
    s = score_entities(refs, hyps)
    assert (s.tp, s.fp, s.fn) == (1, 1, 1)
    assert s.precision == s.recall == s.f1 == 0.5


def test_underscore_and_case_normalization():
    assert normalize_value("New_York") == "new york"
    refs, hyps = paired(
        [frame("f", ("toloc.city_name", "new york"))],
        [frame("f", ("toloc.city_name", "new_york"))],
    )
    assert score_entities(refs, hyps).f1 == 1.0


def test_multiset_semantics_for_duplicates():
    refs, hyps = paired(
        [frame("f", ("a.a", "x"), ("a.a", "x"))],
        [frame("f", ("a.a", "x"))],
    )
    s = score_entities(refs, hyps)
    assert (s.tp, s.fp, s.fn) == (1, 0, 1)


def test_unparseable_hypothesis():
    refs = [("u0", frame("flight", ("a.a", "x")))]
    hyps = [("u0", None)]
    s = score_entities(refs, hyps)
    assert (s.tp, s.fp, s.fn) == (0, 0, 1)
    assert score_intent(refs, hyps).errors == 1


def test_ier_two_wrong_of_eight():
    refs, hyps = paired(
        [frame("a")] * 8,
        [frame("a")] * 6 + [frame("b")] * 2,
    )
    assert score_intent(refs, hyps).ier == 0.25


def test_id_mismatch_rejected():
    refs = [("u0", frame("a"))]
    hyps = [("u1", frame("a"))]
    with pytest.raises(DataError):
        score_entities(refs, hyps)
    with pytest.raises(DataError):
        score_intent([("u0", frame("a"))], [])


def test_zero_denominators():
    refs, hyps = paired([frame("a")], [frame("a", ("x.x", "v"))])
    s = score_entities(refs, hyps)
    assert s.recall == 0.0 and s.f1 == 0.0
    empty = score_entities(*paired([frame("a")], [frame("a")]))
    assert empty.precision == empty.recall == empty.f1 == 0.0


def test_report_shape_and_diffs():
    refs, hyps = paired(
        [frame("flight", ("a.a", "x"))],
        [frame("airfare", ("a.a", "y"))],
    )
    report = score_corpus(refs, hyps, per_utterance=True)
    assert set(report) == {"entities", "intent", "per_utterance"}
    diff = report["per_utterance"][0]
    assert diff["missing"] == [("a.a", "x")] and diff["spurious"] == [("a.a", "y")]


LABELS = ["fromloc.city_name", "toloc.city_name", "airline.name"]


@st.composite
def frame_lists(draw):
    n = draw(st.integers(min_value=1, max_value=5))
    out = []
    for _ in range(n):
        ents = [
            (draw(st.sampled_from(LABELS)), draw(st.sampled_from(["x", "y", "new york"])))
            for _ in range(draw(st.integers(min_value=0, max_value=3)))
        ]
        out.append(frame(draw(st.sampled_from(["flight", "airfare"])), *ents))
    return out


@settings(max_examples=100, deadline=None)
@given(frame_lists(), st.randoms())
def test_swap_and_order_invariance(frames_a, rnd):
    frames_b = [frame_lists().example() for _ in range(0)] or list(frames_a)
    rnd.shuffle(frames_b)
    refs, hyps = paired(frames_a, frames_b)
    fwd = score_entities(refs, hyps)
    rev = score_entities(hyps, refs)
    assert (fwd.tp, fwd.fp, fwd.fn) == (rev.tp, rev.fn, rev.fp)
    assert fwd.precision == rev.recall and fwd.recall == rev.precision
    # order invariance: shuffle the pairing jointly
    idx = list(range(len(refs)))
    rnd.shuffle(idx)
    refs2 = [refs[i] for i in idx]
    hyps2 = [hyps[i] for i in idx]
    s1, s2 = score_entities(refs, hyps), score_entities(refs2, hyps2)
    assert (s1.tp, s1.fp, s1.fn) == (s2.tp, s2.fp, s2.fn)
