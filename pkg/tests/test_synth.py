import math

import numpy as np
import pytest

from hivetrack.detections import ObjectClass, encode_pgm
from hivetrack.synth import (AgentSpec, BundleError, HiveRenderer, HiveScenario, NoiseConfig,
                             corrupt_detections, load_scenario_bundle, make_scenario,
                             render_frames, rounded_truth, simulate, write_scenario_bundle)


def test_still_agents_stay_put():
    sc = make_scenario(5, 300, 300, 40, walker_speed=0.0, jitter_sigma=0.0, seed=2)
    t = simulate(sc)
    assert (t.x == t.x[0]).all() and (t.y == t.y[0]).all()


def test_simulate_is_deterministic():
    sc = make_scenario(6, 400, 400, 100, seed=7, occlusion_fraction=0.5, abdomen_fraction=0.3)
    assert simulate(sc).equals(simulate(sc))
    other = make_scenario(6, 400, 400, 100, seed=8)
    assert not simulate(sc).equals(simulate(other))


def test_walker_matches_hand_stepped_oracle():
    agent = AgentSpec(0, "walker", 1, start=(100.0, 60.0, math.pi))
    sc = HiveScenario(300, 300, 21, agents=(agent,), walker_speed=5.0, heading_persistence=1.0,
                      margin=40.0)
    t = simulate(sc)
    # heading pi until the left margin at x=40 (t=12), then bounces back
    for f in range(21):
        assert t.x[f, 0] == pytest.approx(40.0 + abs(60.0 - 5.0 * f), abs=1e-9)
        assert t.y[f, 0] == pytest.approx(60.0, abs=1e-9)
        want = math.pi if f <= 12 else 0.0
        assert math.cos(t.angle[f, 0]) == pytest.approx(math.cos(want), abs=1e-9)


def test_poses_stay_in_bounds():
    sc = make_scenario(12, 200, 200, 400, walker_speed=6.0, heading_persistence=0.5, seed=4)
    t = simulate(sc)
    assert (t.x >= 0).all() and (t.x < 200).all() and (t.y >= 0).all() and (t.y < 200).all()


def test_schedules_drive_class_and_visibility():
    agent = AgentSpec(0, "walker", 1, cell_schedule=((5, 10),), occlusion_schedule=((20, 25),),
                      start=(150.0, 150.0, 1.0))
    t = simulate(HiveScenario(300, 300, 30, agents=(agent,)))
    assert (t.cls[5:10, 0] == int(ObjectClass.Abdomen)).all() and (t.angle[5:10, 0] == 0).all()
    assert (t.cls[:5, 0] == 0).all()
    assert t.occlusions(0) == [(20, 25)]
    assert not t.visible[20:25, 0].any() and t.visible[:20, 0].all()


def test_min_separation_is_respected():
    sc = make_scenario(15, 400, 400, 300, stationary_fraction=0.0, min_separation=50,
                       walker_speed=3.0, seed=5)
    t = simulate(sc)
    for f in range(0, 300, 7):
        d = np.hypot(t.x[f][:, None] - t.x[f][None], t.y[f][:, None] - t.y[f][None])
        d[np.diag_indices(15)] = np.inf
        assert d.min() >= 50


def test_overlapping_schedules_rejected():
    with pytest.raises(ValueError):
        AgentSpec(0, cell_schedule=((0, 10),), occlusion_schedule=((5, 12),))


# -- rendering -------------------------------------------------------------------

def test_empty_scene_backgrounds_depend_on_seed():
    a = HiveRenderer(HiveScenario(96, 96, 1, seed=1), simulate(HiveScenario(96, 96, 1, seed=1)))
    b = HiveRenderer(HiveScenario(96, 96, 1, seed=2), simulate(HiveScenario(96, 96, 1, seed=2)))
    assert not np.array_equal(a.render(0).intensities, b.render(0).intensities)


def test_region_agrees_with_full_frame():
    sc = make_scenario(4, 200, 160, 3, seed=3)
    r = HiveRenderer(sc, simulate(sc))
    full = r.render(2).intensities
    assert np.array_equal(r.render_region(2, 30, 20, 50, 70), full[20:90, 30:80])
    edge = r.patch(2, 5.0, 150.0)
    assert (edge[:, :35] == 0).all() and (edge[50:, :] == 0).all()


def _stamp(angle):
    agent = AgentSpec(0, "stationary", 11, start=(100.0, 100.0, angle))
    sc = HiveScenario(200, 200, 1, agents=(agent,), jitter_sigma=0.0, seed=9)
    bare = HiveScenario(200, 200, 1, seed=9)
    with_agent = HiveRenderer(sc, simulate(sc)).render_region(0, 60, 60, 81, 81)
    background = HiveRenderer(bare, simulate(bare)).render_region(0, 60, 60, 81, 81)
    return with_agent.astype(int), with_agent != background


def test_rotated_stamp_is_rotated_region():
    img0, mask0 = _stamp(0.0)
    img90, mask90 = _stamp(math.pi / 2)
    rot_mask = np.rot90(mask0, k=-1)
    agree = (rot_mask == mask90).mean()
    assert agree > 0.98
    both = rot_mask & mask90
    assert np.abs(np.rot90(img0, k=-1)[both] - img90[both]).max() <= 1


def test_render_bytes_deterministic():
    sc = make_scenario(3, 96, 96, 2, seed=6)
    a = [encode_pgm(f) for f in render_frames(simulate(sc), sc)]
    b = [encode_pgm(f) for f in render_frames(simulate(sc), sc)]
    assert a == b


# -- noise -----------------------------------------------------------------------

def test_zero_noise_reproduces_truth():
    sc = make_scenario(5, 300, 300, 30, seed=1, abdomen_fraction=0.4)
    t = simulate(sc)
    cd = corrupt_detections(t, NoiseConfig.zero(), 1)
    dets = list(cd.table)
    assert len(dets) == t.visible.sum() and cd.false_positives == []
    for d, aid in zip(dets, cd.source_agent):
        k = t.column(aid)
        assert (d.x, d.y, int(d.cls), d.angle) == (t.x[d.frame, k], t.y[d.frame, k],
                                                   int(t.cls[d.frame, k]), t.angle[d.frame, k])


def test_noise_statistics_match_targets():
    # >= 1e5 true detections: 34 stationary agents x 3000 frames
    sc = make_scenario(34, 1024, 1024, 3000, stationary_fraction=1.0, jitter_sigma=0.0, seed=2)
    t = simulate(sc)
    cd = corrupt_detections(t, NoiseConfig(), 2)
    radial, angular, n_true = [], [], 0
    for d, aid in zip(cd.table, cd.source_agent):
        if aid < 0:
            continue
        n_true += 1
        k = t.column(aid)
        radial.append(math.hypot(d.x - t.x[d.frame, k], d.y - t.y[d.frame, k]))
        diff = (d.angle - t.angle[d.frame, k] + math.pi) % (2 * math.pi) - math.pi
        angular.append(abs(math.degrees(diff)))
    assert n_true >= 1e5
    assert abs(np.mean(radial) - 4.9) <= 0.05 * 4.9
    assert abs(np.mean(angular) - 9.7) <= 0.05 * 9.7
    fp_fraction = len(cd.false_positives) / (n_true + len(cd.false_positives))
    assert 0.05 <= fp_fraction <= 0.07
    assert n_true / t.visible.sum() == pytest.approx(0.98, abs=0.003)


# -- bundle ----------------------------------------------------------------------

def _bundle(tmp_path, n_agents=3, seed=5):
    sc = make_scenario(n_agents, 128, 128, 6, seed=seed, occlusion_fraction=0.5)
    t = simulate(sc)
    cd = corrupt_detections(t, NoiseConfig(), seed)
    write_scenario_bundle(t, render_frames(t, sc), cd, tmp_path, scenario=sc, noise=NoiseConfig(),
                          noise_seed=seed)
    return t, cd


def test_bundle_roundtrip(tmp_path):
    t, cd = _bundle(tmp_path)
    b = load_scenario_bundle(tmp_path, expected_seed=5)
    assert b.truth.equals(rounded_truth(t))
    assert len(list(b.detections)) == len(list(cd.table))
    assert len(b.false_positives) == len(cd.false_positives)
    assert len(list(b.frames_dir.glob("*.pgm"))) == 6
    assert (tmp_path / "frames" / "frame_000000.pgm").exists()


def test_bundle_seed_mismatch(tmp_path):
    _bundle(tmp_path)
    with pytest.raises(BundleError, match="seed"):
        load_scenario_bundle(tmp_path, expected_seed=6)


def test_bundle_checksum_detects_edit(tmp_path):
    _bundle(tmp_path)
    with open(tmp_path / "detections.csv", "a") as fh:
        fh.write("0,1.0,1.0,0,0.0\n")
    with pytest.raises(BundleError, match="checksum"):
        load_scenario_bundle(tmp_path)


def test_empty_scenario_bundle(tmp_path):
    t, _ = _bundle(tmp_path, n_agents=0)
    assert (tmp_path / "detections.csv").read_text() == "frame,x,y,class,angle\n"
    b = load_scenario_bundle(tmp_path)
    assert b.truth.equals(t) and b.truth.num_frames == 6


def test_bundle_write_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    sc = make_scenario(1, 128, 128, 2, seed=1)
    t = simulate(sc)
    with pytest.raises(BundleError, match="file"):
        write_scenario_bundle(t, None, corrupt_detections(t, NoiseConfig(), 1), blocker / "sub")
