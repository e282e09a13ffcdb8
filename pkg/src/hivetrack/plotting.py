"""Trajectory overlays and report figures.

The overlay is a grayscale PGM: black background, one polyline per
trajectory whose shade encodes its mean-speed rank. The slowest trajectory
is drawn at 255 and the fastest at 64, so darker means faster.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .detections import FrameImage, save_frame_image

BRIGHTEST = 255
DARKEST = 64


def mean_speed(traj) -> float:
    """Path length per elapsed frame, 0 for a single entry."""
    if len(traj.frame) < 2:
        return 0.0
    steps = np.hypot(np.diff(traj.x), np.diff(traj.y)).sum()
    return float(steps / max(int(traj.frame[-1]) - int(traj.frame[0]), 1))


def speed_shades(speeds: Sequence[float]) -> list[int]:
    """Shade per trajectory from the rank of its speed among distinct speeds."""
    distinct = sorted(set(speeds))
    if len(distinct) == 1:
        return [BRIGHTEST] * len(speeds)
    step = (BRIGHTEST - DARKEST) / (len(distinct) - 1)
    rank = {s: i for i, s in enumerate(distinct)}
    return [int(round(BRIGHTEST - rank[s] * step)) for s in speeds]


def _draw_segment(canvas: np.ndarray, x0, y0, x1, y1, shade: int) -> None:
    n = int(np.ceil(max(abs(x1 - x0), abs(y1 - y0)))) + 1
    t = np.linspace(0.0, 1.0, n)
    xs = np.floor(x0 + (x1 - x0) * t + 0.5).astype(np.int64)
    ys = np.floor(y0 + (y1 - y0) * t + 0.5).astype(np.int64)
    h, w = canvas.shape
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    canvas[ys[ok], xs[ok]] = shade


def render_overlay(trajectories, bounds: tuple[int, int]) -> FrameImage:
    """Rasterize polylines; brighter (slower) trajectories are drawn first."""
    if not trajectories:
        raise ValueError("no trajectories to plot")
    w, h = bounds
    canvas = np.zeros((h, w), np.uint8)
    shades = speed_shades([mean_speed(t) for t in trajectories])
    order = sorted(range(len(trajectories)), key=lambda i: (-shades[i], trajectories[i].id))
    for i in order:
        t = trajectories[i]
        x, y = np.asarray(t.x, float), np.asarray(t.y, float)
        if len(x) == 1:
            _draw_segment(canvas, x[0], y[0], x[0], y[0], shades[i])
        for j in range(len(x) - 1):
            _draw_segment(canvas, x[j], y[j], x[j + 1], y[j + 1], shades[i])
    return FrameImage(w, h, canvas)


def emit_plot(trajectories, bounds: tuple[int, int], path) -> FrameImage:
    img = render_overlay(trajectories, bounds)
    save_frame_image(img, path)
    return img


# -- matplotlib figures ------------------------------------------------------------

_PNG_META = {"Software": None}


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_trajectories(trajectories, bounds: tuple[int, int], path) -> None:
    """Trajectories on the arena, gray level by speed rank as in the overlay."""
    plt = _pyplot()
    shades = speed_shades([mean_speed(t) for t in trajectories])
    fig, ax = plt.subplots(figsize=(6, 6 * bounds[1] / max(bounds[0], 1)))
    ax.set_facecolor("black")
    for t, s in sorted(zip(trajectories, shades), key=lambda p: (-p[1], p[0].id)):
        ax.plot(t.x, t.y, color=str(s / 255), lw=0.8)
    ax.set_xlim(0, bounds[0])
    ax.set_ylim(bounds[1], 0)
    ax.set_aspect("equal")
    ax.set_xlabel("x (px)")
    ax.set_ylabel("y (px)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_tracked_time(evals, path) -> None:
    """Histogram of tracked seconds per evaluation window."""
    plt = _pyplot()
    names = sorted({k for ev in evals for k in ev.tracked_seconds})
    fig, axes = plt.subplots(1, max(len(names), 1), figsize=(4 * max(len(names), 1), 3),
                             squeeze=False)
    for ax, name in zip(axes[0], names):
        vals = [ev.tracked_seconds[name] for ev in evals]
        ax.hist(vals, bins=20, color="0.3")
        ax.set_title(f"window {name}")
        ax.set_xlabel("tracked time (s)")
        ax.set_ylabel("trajectories")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_progress(log_lines: Sequence[str], path) -> None:
    """Extensions and final training loss per joining iteration."""
    plt = _pyplot()
    rows = [dict(kv.split("=") for kv in line.split()) for line in log_lines]
    it = [int(r["iteration"]) for r in rows]
    fig, (a, b) = plt.subplots(2, 1, figsize=(6, 4), sharex=True)
    a.plot(it, [int(r["extensions"]) for r in rows], color="k", lw=0.8)
    a.set_ylabel("extensions")
    b.plot(it, [float(r["loss"]) for r in rows], color="k", lw=0.8)
    b.set_ylabel("batch loss")
    b.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
