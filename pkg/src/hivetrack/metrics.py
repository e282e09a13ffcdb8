"""Trajectory evaluation against ground truth: mostly tracked / mostly lost,
identity swaps and an automated failure-cause breakdown.

Failure causes follow fixed rules applied where a trajectory's tracked time
ends: a committed false positive is a detection error, an unreturned swap is
an identity swap, an end next to an occlusion of the followed agent is an
occlusion, anything else is a loss.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detections import Detection
from .synth import GroundTruth

CAUSES = ("DetectionError", "IDSwap", "Occlusion", "Lost")


@dataclass(frozen=True)
class EvalWindow:
    name: str
    span_seconds: float
    mt_min_seconds: float
    ml_max_seconds: float

    def __post_init__(self):
        if self.mt_min_seconds > self.span_seconds:
            raise ValueError(f"{self.name}: mt_min exceeds span")
        if self.ml_max_seconds >= self.mt_min_seconds:
            raise ValueError(f"{self.name}: ml_max must be below mt_min")


MT2 = EvalWindow("2", 120.0, 100.0, 10.0)
MT5 = EvalWindow("5", 300.0, 240.0, 30.0)


@dataclass(frozen=True)
class EvalConfig:
    match_radius: float = 20.0
    windows: tuple[EvalWindow, ...] = (MT2, MT5)
    generic_mt_fraction: float = 0.8
    generic_ml_fraction: float = 0.2
    occlusion_lookahead: int = 10

    def generic_window(self, duration_seconds: float) -> EvalWindow:
        return EvalWindow("generic", duration_seconds,
                          self.generic_mt_fraction * duration_seconds,
                          self.generic_ml_fraction * duration_seconds)


@dataclass
class SwapEvent:
    frame: int
    from_agent: int
    to_agent: int
    returned: bool


@dataclass
class TrajectoryEval:
    trajectory_id: int
    frames: np.ndarray
    matched: np.ndarray  # agent id per entry, -1 if nothing within the radius
    dominant_agent: int | None
    tracked_interval: tuple[int, int] | None  # [first, last] frame followed on the dominant agent
    swap_events: list[SwapEvent]
    tracked_seconds: dict[str, float] = field(default_factory=dict)
    category: dict[str, str] = field(default_factory=dict)
    failure_cause: str | None = None

    @property
    def unreturned_swaps(self) -> int:
        return sum(not s.returned for s in self.swap_events)


def associate_to_truth(traj, truth: GroundTruth, cfg: EvalConfig = EvalConfig()) -> TrajectoryEval:
    """Match each entry to the nearest visible agent within ``match_radius``.

    ``traj`` needs ``id``, ``frame``, ``x`` and ``y`` (see TrajectoryRecord).
    The dominant agent is the most matched one, ties going to the agent
    matched first. Excursions away from it that later come back are returned
    swaps and count as tracked.
    """
    frames = np.asarray(traj.frame, np.int64)
    if frames.size and (frames.min() < 0 or frames.max() >= truth.num_frames):
        raise ValueError(f"trajectory {traj.id}: frame outside truth range "
                         f"[0, {truth.num_frames})")
    ids = np.asarray(truth.agent_ids)
    matched = np.full(frames.size, -1, np.int64)
    r2 = cfg.match_radius ** 2
    for i, f in enumerate(frames):
        vis = truth.visible[f]
        if not vis.any():
            continue
        dx = truth.x[f, vis] - traj.x[i]
        dy = truth.y[f, vis] - traj.y[i]
        d2 = dx * dx + dy * dy
        j = int(np.argmin(d2))
        if d2[j] <= r2:
            matched[i] = ids[vis][j]

    hits = matched[matched >= 0]
    if hits.size == 0:
        return TrajectoryEval(traj.id, frames, matched, None, None, [])
    counts = Counter(hits.tolist())
    best = max(counts.values())
    dominant = next(a for a in hits.tolist() if counts[a] == best)

    on_dom = np.nonzero(matched == dominant)[0]
    first, last = int(on_dom[0]), int(on_dom[-1])
    events: list[SwapEvent] = []
    lead = matched[:first][matched[:first] >= 0]
    if lead.size:
        events.append(SwapEvent(int(frames[first]), int(lead[-1]), dominant, False))
    i = first
    while i < len(matched):
        a = matched[i]
        if a >= 0 and a != dominant:
            j = i
            while j < len(matched) and matched[j] != dominant:
                j += 1
            events.append(SwapEvent(int(frames[i]), dominant, int(a), j < len(matched)))
            i = j
        else:
            i += 1
    return TrajectoryEval(traj.id, frames, matched, dominant,
                          (int(frames[first]), int(frames[last])), events)


def tracked_seconds(ev: TrajectoryEval, window: EvalWindow, fps: float) -> float:
    if ev.tracked_interval is None:
        return 0.0
    lo, hi = ev.tracked_interval
    span = int(round(window.span_seconds * fps))
    n = max(0, min(hi + 1, span) - lo)
    return min(n / fps, window.span_seconds)


def categorize(seconds: float, window: EvalWindow) -> str:
    if seconds >= window.mt_min_seconds:
        return "MT"
    if seconds < window.ml_max_seconds:
        return "ML"
    return "Mid"


def evaluate(trajectories, truth: GroundTruth, cfg: EvalConfig = EvalConfig(),
             false_positives: Sequence[Detection] | None = None) -> list[TrajectoryEval]:
    """Associate every trajectory and fill per-window tracked time and categories."""
    duration = truth.num_frames / truth.fps
    windows = list(cfg.windows) + [cfg.generic_window(duration)]
    evals = []
    for t in trajectories:
        ev = associate_to_truth(t, truth, cfg)
        for w in windows:
            s = tracked_seconds(ev, w, truth.fps)
            ev.tracked_seconds[w.name] = s
            ev.category[w.name] = categorize(s, w)
        evals.append(ev)
    return evals


def mt_ml_summary(evals: Sequence[TrajectoryEval], window: EvalWindow | str) -> dict[str, float]:
    name = window if isinstance(window, str) else window.name
    if not evals:
        raise ValueError("no trajectories to summarize")
    n = len(evals)
    cats = Counter(ev.category[name] for ev in evals)
    return {"mt": cats["MT"] / n, "ml": cats["ML"] / n, "mid": cats["Mid"] / n}


def _fp_key(frame: int, x: float, y: float) -> tuple[int, str, str]:
    return (int(frame), f"{x:.6f}", f"{y:.6f}")


def failure_cause(ev: TrajectoryEval, traj, truth: GroundTruth, fp_keys: set,
                  cfg: EvalConfig) -> str:
    if ev.dominant_agent is None:
        return "DetectionError" if all(
            _fp_key(f, x, y) in fp_keys for f, x, y in zip(traj.frame, traj.x, traj.y)) else "Lost"
    end = np.nonzero(ev.matched == ev.dominant_agent)[0][-1]
    nxt = end + 1
    if nxt < len(ev.frames) and _fp_key(traj.frame[nxt], traj.x[nxt], traj.y[nxt]) in fp_keys:
        return "DetectionError"
    if any(not s.returned for s in ev.swap_events):
        return "IDSwap"
    end_frame = int(ev.frames[end])
    col = truth.column(ev.dominant_agent)
    ahead = truth.visible[end_frame + 1:end_frame + 1 + cfg.occlusion_lookahead, col]
    if ahead.size and not ahead.all():
        return "Occlusion"
    return "Lost"


def error_breakdown(evals: Sequence[TrajectoryEval], trajectories, truth: GroundTruth,
                    false_positives: Sequence[Detection] | None,
                    cfg: EvalConfig = EvalConfig(), window: str | None = None) -> dict[str, float]:
    """Assign a cause to every non-MT trajectory of ``window`` (default: the
    longest configured one). Fractions are over all evaluated trajectories."""
    if false_positives is None:
        raise ValueError("false-positive sidecar is required for the error breakdown")
    name = window or max(cfg.windows, key=lambda w: w.span_seconds).name
    fp_keys = {_fp_key(d.frame, d.x, d.y) for d in false_positives}
    counts = Counter()
    for ev, traj in zip(evals, trajectories):
        if ev.category[name] == "MT":
            ev.failure_cause = None
            continue
        ev.failure_cause = failure_cause(ev, traj, truth, fp_keys, cfg)
        counts[ev.failure_cause] += 1
    n = len(evals)
    return {c: (counts[c] / n if n else 0.0) for c in CAUSES}


@dataclass
class EvalReport:
    summary: dict
    evals: list[TrajectoryEval]

    def to_json(self) -> str:
        detail = []
        for ev in self.evals:
            detail.append({
                "trajectory_id": int(ev.trajectory_id),
                "dominant_agent": ev.dominant_agent,
                "tracked_interval": list(ev.tracked_interval) if ev.tracked_interval else None,
                "tracked_seconds": {k: round(v, 6) for k, v in ev.tracked_seconds.items()},
                "category": ev.category,
                "swap_events": [vars(s) for s in ev.swap_events],
                "failure_cause": ev.failure_cause,
            })
        return json.dumps({**self.summary, "trajectories": detail}, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["key,value"]
        for k, v in sorted(_flatten(self.summary).items()):
            lines.append(f"{k},{v}")
        for ev in self.evals:
            p = f"trajectory.{ev.trajectory_id}"
            lines.append(f"{p}.dominant_agent,{'' if ev.dominant_agent is None else ev.dominant_agent}")
            for k, v in sorted(ev.tracked_seconds.items()):
                lines.append(f"{p}.tracked_seconds.{k},{v:.6f}")
            for k, v in sorted(ev.category.items()):
                lines.append(f"{p}.category.{k},{v}")
            lines.append(f"{p}.swaps,{len(ev.swap_events)}")
            lines.append(f"{p}.failure_cause,{ev.failure_cause or ''}")
        return "\n".join(lines) + "\n"


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def build_report(trajectories, truth: GroundTruth, false_positives: Sequence[Detection] | None,
                 cfg: EvalConfig = EvalConfig()) -> EvalReport:
    evals = evaluate(trajectories, truth, cfg)
    summary: dict = {"num_trajectories": len(evals)}
    if evals:
        for w in cfg.windows:
            s = mt_ml_summary(evals, w)
            summary[f"mt{w.name}"] = round(s["mt"], 6)
            summary[f"ml{w.name}"] = round(s["ml"], 6)
        g = mt_ml_summary(evals, "generic")
        summary["mt_generic"] = round(g["mt"], 6)
        summary["ml_generic"] = round(g["ml"], 6)
    summary["swap_count"] = sum(len(ev.swap_events) for ev in evals)
    summary["unreturned_swap_count"] = sum(ev.unreturned_swaps for ev in evals)
    if false_positives is not None and evals:
        causes = error_breakdown(evals, trajectories, truth, false_positives, cfg)
        summary["causes"] = {k: round(v, 6) for k, v in causes.items()}
    summary["cause_rules"] = ("automated: FP commit -> DetectionError; unreturned swap -> IDSwap; "
                              "followed agent occluded right after the end -> Occlusion; else Lost")
    return EvalReport(summary, evals)


def write_report(report: EvalReport, json_path, csv_path=None) -> None:
    Path(json_path).write_text(report.to_json())
    if csv_path is not None:
        Path(csv_path).write_text(report.to_csv())
