from types import SimpleNamespace

import numpy as np
import pytest

from hivetrack.detections import load_frame_image
from hivetrack.plotting import (BRIGHTEST, DARKEST, emit_plot, mean_speed, plot_trajectories,
                                render_overlay, speed_shades)


def traj(tid, xs, ys):
    return SimpleNamespace(id=tid, frame=np.arange(len(xs)), x=np.asarray(xs, float),
                           y=np.asarray(ys, float))


def test_stationary_trajectory_is_bright_point():
    img = render_overlay([traj(0, [10.2] * 20, [12.0] * 20)], (32, 32)).intensities
    assert img[12, 10] == BRIGHTEST and (img > 0).sum() == 1


def test_faster_trajectory_is_darker():
    still = traj(0, [5.0] * 30, [5.0] * 30)
    fast = traj(1, 10 + 5.0 * np.arange(30), [40.0] * 30)
    assert mean_speed(still) == 0.0 and mean_speed(fast) == pytest.approx(5.0)
    img = render_overlay([still, fast], (200, 60)).intensities
    assert img[5, 5] == BRIGHTEST and img[40, 50] == DARKEST
    assert img[40, 50] < img[5, 5]


def test_shades_follow_rank():
    assert speed_shades([3.0, 0.0, 1.0]) == [64, 255, 160]
    assert speed_shades([2.0, 2.0]) == [255, 255]


def test_overlay_bytes_repeat(tmp_path):
    ts = [traj(i, np.linspace(0, 90, 40) * (i + 1) / 3, np.linspace(5, 60, 40)) for i in range(3)]
    emit_plot(ts, (100, 70), tmp_path / "a.pgm")
    emit_plot(ts, (100, 70), tmp_path / "b.pgm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
    assert load_frame_image(tmp_path / "a.pgm").width == 100


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        render_overlay([], (10, 10))


def test_png_figure_is_deterministic(tmp_path):
    ts = [traj(0, [1, 5, 9], [2, 2, 8]), traj(1, [30, 30], [30, 31])]
    plot_trajectories(ts, (40, 40), tmp_path / "a.png")
    plot_trajectories(ts, (40, 40), tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
