import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hivetrack.detections import Detection, ObjectClass
from hivetrack.metrics import (MT2, MT5, EvalConfig, EvalWindow, associate_to_truth,
                               build_report, categorize, error_breakdown, evaluate, mt_ml_summary)
from hivetrack.synth import GroundTruth

FPS = 10.0


def truth_of(paths, visible=None):
    """paths: agent id -> (T, 2) array of positions."""
    ids = sorted(paths)
    xy = np.stack([paths[a] for a in ids], axis=1)
    T, A = xy.shape[:2]
    vis = np.ones((T, A), bool) if visible is None else visible
    return GroundTruth(ids, xy[..., 0].copy(), xy[..., 1].copy(), np.zeros((T, A)),
                       np.zeros((T, A), np.int64), vis, 2000, 2000, FPS)


def traj(tid, frames, xs, ys):
    return SimpleNamespace(id=tid, frame=np.asarray(frames), x=np.asarray(xs, float),
                           y=np.asarray(ys, float))


def parked(T, x, y):
    return np.tile([x, y], (T, 1)).astype(float)


def three_agents(T):
    return truth_of({3: parked(T, 100, 100), 7: parked(T, 500, 500), 9: parked(T, 900, 900)})


def test_exactly_on_agent():
    t = three_agents(200)
    ev = associate_to_truth(traj(0, range(200), [500] * 200, [500] * 200), t)
    assert ev.dominant_agent == 7 and ev.swap_events == [] and ev.tracked_interval == (0, 199)


def test_returned_excursion_is_not_a_discontinuity():
    t = three_agents(200)
    xs = [500] * 200
    ys = [500] * 200
    for f in range(50, 60):
        xs[f] = ys[f] = 100
    ev = associate_to_truth(traj(0, range(200), xs, ys), t)
    assert len(ev.swap_events) == 1
    s = ev.swap_events[0]
    assert (s.frame, s.from_agent, s.to_agent, s.returned) == (50, 7, 3, True)
    assert ev.tracked_interval == (0, 199)


def test_permanent_swap_stops_tracked_time():
    t = three_agents(300)
    xs = [500] * 120 + [100] * 100 + [900] * 80
    ev = associate_to_truth(traj(0, range(300), xs, xs), t)
    assert ev.dominant_agent == 7
    assert [s.returned for s in ev.swap_events] == [False]
    assert ev.tracked_interval == (0, 119)
    evals = evaluate([traj(0, range(300), xs, xs)], t)
    assert evals[0].tracked_seconds["generic"] == pytest.approx(12.0)


def test_dominant_tie_goes_to_first_matched():
    t = three_agents(20)
    xs = [100] * 10 + [500] * 10
    assert associate_to_truth(traj(0, range(20), xs, xs), t).dominant_agent == 3


def test_frame_outside_truth_rejected():
    with pytest.raises(ValueError, match="outside"):
        associate_to_truth(traj(0, [0, 25], [1, 1], [1, 1]), three_agents(20))


def test_match_radius_boundary():
    t = three_agents(2)
    ev = associate_to_truth(traj(0, [0, 1], [520, 520.01], [500, 500]), t)
    assert ev.matched.tolist() == [7, -1]


@settings(max_examples=30, deadline=None)
@given(st.floats(-300, 300), st.floats(-300, 300), st.integers(0, 2**16))
def test_translation_invariance(dx, dy, seed):
    rng = np.random.default_rng(seed)
    T = 30
    paths = {a: rng.uniform(400, 600, (T, 2)) for a in range(4)}
    px = rng.uniform(400, 600, T)
    py = rng.uniform(400, 600, T)
    a = associate_to_truth(traj(0, range(T), px, py), truth_of(paths))
    moved = {k: v + [dx, dy] for k, v in paths.items()}
    b = associate_to_truth(traj(0, range(T), px + dx, py + dy), truth_of(moved))
    assert a.matched.tolist() == b.matched.tolist()
    assert a.dominant_agent == b.dominant_agent


# -- categories ------------------------------------------------------------------

def test_threshold_arithmetic():
    assert categorize(90.0, MT2) == "Mid"
    assert categorize(100.0, MT2) == "MT"
    assert categorize(9.9, MT2) == "ML"
    assert categorize(240.0, MT5) == "MT" and categorize(29.0, MT5) == "ML"


def test_window_invariants():
    with pytest.raises(ValueError):
        EvalWindow("bad", 10, 20, 5)
    with pytest.raises(ValueError):
        EvalWindow("bad", 100, 50, 50)


def test_summary_fractions():
    T = 3000
    t = three_agents(T)
    full = traj(0, range(T), [500] * T, [500] * T)
    half = traj(1, range(1500), [100] * 1500, [100] * 1500)
    short = traj(2, range(50), [900] * 50, [900] * 50)
    evals = evaluate([full, half, short], t)
    for w in ("2", "5", "generic"):
        s = mt_ml_summary(evals, w)
        assert s["mt"] + s["ml"] + s["mid"] == pytest.approx(1.0)
    assert mt_ml_summary(evals, "2") == pytest.approx({"mt": 2 / 3, "ml": 1 / 3, "mid": 0.0})
    assert mt_ml_summary(evals, "5") == pytest.approx({"mt": 1 / 3, "ml": 1 / 3, "mid": 1 / 3})
    with pytest.raises(ValueError):
        mt_ml_summary([], "2")


def test_tracked_time_capped_by_window():
    t = three_agents(3000)
    ev = evaluate([traj(0, range(3000), [500] * 3000, [500] * 3000)], t)[0]
    assert ev.tracked_seconds == {"2": 120.0, "5": 300.0, "generic": 300.0}


# -- causes ----------------------------------------------------------------------

def fp(frame, x, y):
    return Detection(frame, float(x), float(y), ObjectClass.FullBee, 0.0)


def test_stall_inside_occlusion_is_occlusion():
    T = 1000
    vis = np.ones((T, 1), bool)
    vis[400:460] = False
    t = truth_of({1: parked(T, 300, 300)}, vis)
    tr = traj(0, range(400), [300] * 400, [300] * 400)
    evals = evaluate([tr], t)
    causes = error_breakdown(evals, [tr], t, [])
    assert evals[0].failure_cause == "Occlusion" and causes["Occlusion"] == 1.0


def test_committed_false_positive_is_detection_error():
    T = 1000
    t = truth_of({1: parked(T, 300, 300)})
    frames = list(range(401))
    xs = [300] * 400 + [1200]
    tr = traj(0, frames, xs, xs)
    evals = evaluate([tr], t)
    error_breakdown(evals, [tr], t, [fp(400, 1200, 1200)])
    assert evals[0].failure_cause == "DetectionError"


def test_crossing_swap_is_idswap():
    T = 3000
    t = truth_of({1: parked(T, 300, 300), 2: parked(T, 600, 600)})
    xs = [300] * 800 + [600] * 700
    tr = traj(0, range(1500), xs, xs)
    evals = evaluate([tr], t)
    error_breakdown(evals, [tr], t, [])
    assert evals[0].swap_events[0].frame == 800
    assert evals[0].failure_cause == "IDSwap"


def test_plain_end_is_lost_and_causes_exhaustive():
    T = 3000
    t = truth_of({1: parked(T, 300, 300), 2: parked(T, 600, 600)})
    lost = traj(0, range(500), [300] * 500, [300] * 500)
    good = traj(1, range(3000), [600] * 3000, [600] * 3000)
    evals = evaluate([lost, good], t)
    causes = error_breakdown(evals, [lost, good], t, [])
    assert evals[0].failure_cause == "Lost" and evals[1].failure_cause is None
    assert sum(causes.values()) == pytest.approx(0.5)


def test_breakdown_requires_sidecar():
    t = three_agents(10)
    tr = traj(0, range(10), [500] * 10, [500] * 10)
    with pytest.raises(ValueError, match="false-positive"):
        error_breakdown(evaluate([tr], t), [tr], t, None)


def test_report_keys_and_csv():
    t = three_agents(3000)
    trs = [traj(0, range(3000), [500] * 3000, [500] * 3000),
           traj(1, range(100), [100] * 100, [100] * 100)]
    rep = build_report(trs, t, [], EvalConfig())
    data = json.loads(rep.to_json())
    for key in ("mt2", "ml2", "mt5", "ml5", "swap_count", "causes", "trajectories"):
        assert key in data
    assert data["mt5"] == 0.5 and data["causes"]["Lost"] == 0.5
    csv = rep.to_csv().splitlines()
    assert csv[0] == "key,value" and "mt5,0.5" in csv
