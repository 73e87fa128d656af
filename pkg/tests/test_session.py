import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivoseval.client import fixed_step_clock
from ivoseval.dataset import load_manifest
from ivoseval.robot import estimate_annotation_time
from ivoseval.scribbles import Scribble, ScribbleSet
from ivoseval.session import (
    LogError,
    Phase,
    PhaseError,
    PredictionFormatError,
    QualityTimeCurve,
    SessionClosed,
    SessionConfig,
    SessionError,
    SessionLog,
    aggregate_report,
    build_report,
    close_session,
    curve,
    curve_from_records,
    InteractionRecord,
    open_session,
    quality_at_budget,
    read_log,
    step_value,
    submit_prediction,
    time_to_quality,
    TrackParams,
)


@pytest.fixture(scope="module")
def seq(synth_root):
    m = load_manifest(synth_root)
    info = m.sequence("synth-000")
    return info, m.load_annotations("synth-000")


def _config(info, **kw):
    return SessionConfig(info.name, info.objects, **kw)


def _blank(gt):
    return [np.zeros_like(g) for g in gt]


# -- opening --------------------------------------------------------------------


def test_pool_scribbles_pass_through(seq):
    info, gt = seq
    pool = ScribbleSet(info.name, (Scribble(4, 1, ((0.2, 0.2), (0.4, 0.4)), "human", 0.0, 2.5),))
    state, scr = open_session(_config(info), gt, pool)
    assert scr is pool and scr.scribbles[0].kind == "human"
    assert state.initial_frame == 4 and state.pending_annotation_s == 2.5


def test_bootstrap_on_largest_frame(seq):
    info, gt = seq
    state, scr = open_session(_config(info), gt)
    areas = [int(sum((g == o).sum() for o in info.objects)) for g in gt]
    assert state.initial_frame == int(np.argmax(areas))
    assert scr.frames == [state.initial_frame]
    assert all(s.kind == "bootstrap" for s in scr.scribbles)
    assert state.phase is Phase.AWAITING_PREDICTION


def test_independent_sessions(seq):
    info, gt = seq
    a, _ = open_session(_config(info), gt)
    b, _ = open_session(_config(info), gt)
    assert a.id != b.id
    submit_prediction(a, gt, gt)
    assert not b.history


def test_open_errors(seq):
    info, gt = seq
    with pytest.raises(SessionError):
        open_session(SessionConfig("x", ()), gt)
    with pytest.raises(SessionError):
        open_session(_config(info), [])
    with pytest.raises(SessionError):
        SessionConfig("x", (1,), max_interactions=0)


# -- submitting -----------------------------------------------------------------


def test_perfect_masks_close_error_free(seq):
    info, gt = seq
    state, _ = open_session(_config(info), gt)
    res = submit_prediction(state, gt, gt)
    assert res.closed_reason == "error-free" and res.record.overall == 1.0
    assert state.closed and state.report.tracks.quality_at_budget == 1.0
    with pytest.raises(SessionClosed):
        submit_prediction(state, gt, gt)


def test_single_interaction_budget(seq):
    info, gt = seq
    state, _ = open_session(_config(info, max_interactions=1), gt)
    assert submit_prediction(state, _blank(gt), gt).closed_reason == "max-interactions"


def test_wall_budget(seq):
    info, gt = seq
    state, _ = open_session(_config(info, wall_budget_s=0.1), gt, clock=fixed_step_clock(1.0))
    assert submit_prediction(state, _blank(gt), gt).closed_reason == "wall-budget"


def test_ledger_over_three_turns(seq, tmp_path):
    info, gt = seq
    log = SessionLog(tmp_path / "s.jsonl")
    state, scr = open_session(_config(info, max_interactions=3), gt, clock=fixed_step_clock(0.75), log=log)
    expected_annotation = [estimate_annotation_time(scr, state.config.cost_model)]
    for _ in range(3):
        res = submit_prediction(state, _blank(gt), gt)
        if res.scribbles is not None:
            assert len(res.scribbles.frames) == 1
            expected_annotation.append(estimate_annotation_time(res.scribbles, state.config.cost_model))
    records = read_log(log.path).records
    assert len(records) == 3
    total = 0.0
    for r, ann in zip(records, expected_annotation):
        assert r.annotation_s == ann and r.compute_s == pytest.approx(0.75)
        total += r.annotation_s + r.compute_s
        assert r.cumulative_s == pytest.approx(total, abs=1e-12)
    times = [p[0] for p in curve(state).points]
    assert times == sorted(set(times))


def test_rejections_leave_state_untouched(seq):
    info, gt = seq
    state, _ = open_session(_config(info), gt, deliver=False)
    with pytest.raises(PhaseError):
        submit_prediction(state, gt, gt)
    state.mark_delivered()
    with pytest.raises(PhaseError):
        state.mark_delivered()
    anchor = state.anchor
    with pytest.raises(PredictionFormatError):
        submit_prediction(state, gt[:3], gt)
    with pytest.raises(PredictionFormatError):
        submit_prediction(state, [g[:10] for g in gt], gt)
    with pytest.raises(PredictionFormatError):
        submit_prediction(state, [g.astype(int) + 300 for g in gt], gt)
    assert state.anchor == anchor and not state.history and state.phase is Phase.AWAITING_PREDICTION


def test_close_session(seq):
    info, gt = seq
    state, _ = open_session(_config(info), gt)
    with pytest.raises(SessionError):
        close_session(state)
    submit_prediction(state, _blank(gt), gt)
    close_session(state)
    assert state.close_reason == "abandoned"


# -- curves and tracks ----------------------------------------------------------


def _rec(i, t, v, per=None):
    return InteractionRecord(i, 0.0, 0.0, t, v, per or {1: v})


def test_curve_projection():
    recs = [_rec(1, 12.0, 0.7)]
    assert curve_from_records(recs).points == ((12.0, 0.7),)
    recs = [_rec(1, 5.0, 0.8), _rec(2, 9.0, 0.3), _rec(3, 11.0, 0.5)]
    assert curve_from_records(recs).points == ((5.0, 0.8), (9.0, 0.3), (11.0, 0.5))
    with pytest.raises(SessionError):
        curve_from_records([])


def test_quality_at_budget_examples():
    c = QualityTimeCurve(((10.0, 0.4), (50.0, 0.6)), {})
    assert quality_at_budget(c, 5.0, 10, 2) == (0.6, 100.0)
    assert quality_at_budget(c, 1.0, 30, 1) == (0.4, 30.0)
    assert quality_at_budget(c, 1.0, 5, 1) == (0.0, 5.0)
    assert quality_at_budget(c, 5.0, 1, 2)[0] == 0.4  # exactly at a point counts
    with pytest.raises(SessionError):
        quality_at_budget(c, 0.0, 1, 1)


def test_time_to_quality_examples():
    per = {1: ((5.0, 0.3), (13.0, 0.65)), 2: ((13.0, 0.5), (20.0, 0.6))}
    total, reached = time_to_quality(per, 0.6, 300.0)
    assert total == 33.0 and reached == {1: 13.0, 2: 20.0}
    total, reached = time_to_quality({1: ((4.0, 0.1),)}, 0.6, 300.0)
    assert total == 300.0 and reached == {1: None}
    with pytest.raises(SessionError):
        time_to_quality(per, 0.0, 300.0)


curves = st.lists(st.tuples(st.floats(0.1, 10), st.floats(0, 1)), min_size=1, max_size=8).map(
    lambda steps: tuple(zip(np.cumsum([d for d, _ in steps]).tolist(), [v for _, v in steps]))
)


@settings(max_examples=100, deadline=None)
@given(curves, st.floats(0, 100), st.floats(0, 100))
def test_quality_at_budget_returns_curve_value(points, a, b):
    v = step_value(points, a)
    assert v == 0.0 or v in [p[1] for p in points]
    mono = tuple((t, float(x)) for (t, _), x in zip(points, np.maximum.accumulate([p[1] for p in points])))
    lo, hi = sorted((a, b))
    assert step_value(mono, lo) <= step_value(mono, hi)


@settings(max_examples=100, deadline=None)
@given(curves, curves, st.floats(0.01, 1), st.floats(0.01, 1))
def test_time_to_quality_monotone_in_threshold(c1, c2, th1, th2):
    lo, hi = sorted((th1, th2))
    per = {1: c1, 2: c2}
    assert time_to_quality(per, lo, 300.0)[0] <= time_to_quality(per, hi, 300.0)[0]


def _report(points, sid="s"):
    recs = [_rec(i + 1, t, v) for i, (t, v) in enumerate(points)]
    return build_report(sid, "seq", 2, [1], "max-interactions", recs, TrackParams())


def test_aggregate_report():
    a = _report([(1.0, 0.2), (3.0, 0.8)])
    one = aggregate_report([a], grid=[0, 1, 2, 3, 4])
    assert one.mean_curve == (0.0, 0.2, 0.2, 0.8, 0.8)
    two = aggregate_report([a, a], grid=[0, 1, 2, 3, 4])
    assert two.mean_curve == one.mean_curve and two.quality_mean == one.quality_mean
    assert two.speed_total_s == 2 * one.speed_total_s
    b = _report([(2.0, 0.6)])
    mixed = aggregate_report([a, b], grid=[0, 1, 2, 3])
    assert mixed.mean_curve == pytest.approx((0.0, 0.1, 0.4, 0.7))
    auto = aggregate_report([a], grid_step_s=1.0)
    assert auto.grid == (0.0, 1.0, 2.0, 3.0)
    with pytest.raises(SessionError):
        aggregate_report([])
    assert one.curve_csv().splitlines()[0] == "time_s,jf"
    assert one.tracks_csv().splitlines()[-1].startswith("ALL,")


# -- logs -----------------------------------------------------------------------


def test_log_replay_matches_live_report(seq, tmp_path):
    info, gt = seq
    log = SessionLog(tmp_path / "s.jsonl")
    state, _ = open_session(_config(info, max_interactions=2), gt, log=log)
    submit_prediction(state, _blank(gt), gt)
    submit_prediction(state, _blank(gt), gt)
    logged = read_log(log.path)
    assert logged.closed
    assert logged.rebuild_report().dumps() == state.report.dumps()
    assert json.dumps(logged.close["report"], sort_keys=True) == state.report.dumps()


def test_corrupt_log_reports_line(seq, tmp_path):
    info, gt = seq
    log = SessionLog(tmp_path / "s.jsonl")
    state, _ = open_session(_config(info, max_interactions=3), gt, log=log)
    submit_prediction(state, _blank(gt), gt)
    submit_prediction(state, _blank(gt), gt)
    lines = log.path.read_text().splitlines()
    log.path.write_text("\n".join(lines[:2] + [lines[2][: len(lines[2]) // 2]]) + "\n")
    with pytest.raises(LogError, match="line 3"):
        read_log(log.path)
    log.path.write_text("")
    with pytest.raises(LogError):
        read_log(log.path)
