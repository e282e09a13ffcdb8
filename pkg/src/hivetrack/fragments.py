"""Greedy configuration matching of detections into short track fragments.

Consecutive frames are linked with the similarity

    D = d + w|c_i - c_j| + w|sin(a_i - a_j)| + |dx_i - dx_j| + |dy_i - dy_j|

where d is the Euclidean distance and (dx, dy) are per-frame motion vectors.
Pairs are accepted cheapest first while D stays below the threshold; no
global assignment is searched for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detections import Detection, DetectionArrays, DetectionTable, ObjectClass


class NoInitialSetError(RuntimeError):
    pass


@dataclass(frozen=True)
class MatcherConfig:
    w: float = 20.0
    cost_threshold: float = 50.0
    max_gap: int = 10
    min_fragment_length: int = 30

    def __post_init__(self):
        if min(self.w, self.cost_threshold, self.max_gap, self.min_fragment_length) <= 0:
            raise ValueError("matcher parameters must be strictly positive")
        if self.max_gap < 1:
            raise ValueError("max_gap must be >= 1")


@dataclass
class TrackHead:
    fragment_id: int
    last_detection: Detection
    last_motion: tuple[float, float] | None = None
    frames_since_match: int = 0


@dataclass
class TrackFragment:
    id: int
    detections: list[Detection]
    indices: list[int] = field(default_factory=list)  # rows in table iteration order

    def __len__(self):
        return len(self.detections)

    @property
    def first_frame(self) -> int:
        return self.detections[0].frame

    @property
    def last_frame(self) -> int:
        return self.detections[-1].frame


def pair_cost(head: TrackHead, det: Detection, cfg: MatcherConfig) -> float:
    last = head.last_detection
    gap = det.frame - last.frame
    ddx = det.x - last.x
    ddy = det.y - last.y
    cost = math.sqrt(ddx * ddx + ddy * ddy)
    cost += cfg.w * abs(int(last.cls) - int(det.cls))
    # fmod is exact, so a head-tail flip costs exactly 0
    cost += cfg.w * abs(math.sin(math.fmod(last.angle - det.angle, math.pi)))
    if head.last_motion is not None:
        mx, my = head.last_motion
        cost += abs(mx - ddx / gap) + abs(my - ddy / gap)
    return cost


def cost_matrix(hx, hy, hc, ha, hmx, hmy, has_motion, hframe,
                dx, dy, dc, da, frame, cfg: MatcherConfig) -> np.ndarray:
    """Vectorized pair_cost for all (head, detection) pairs of one frame."""
    ex = dx[None, :] - hx[:, None]
    ey = dy[None, :] - hy[:, None]
    cost = np.sqrt(ex * ex + ey * ey)
    cost += cfg.w * np.abs(hc[:, None] - dc[None, :])
    cost += cfg.w * np.abs(np.sin(np.fmod(ha[:, None] - da[None, :], np.pi)))
    gap = (frame - hframe).astype(np.float64)[:, None]
    motion = np.abs(hmx[:, None] - ex / gap) + np.abs(hmy[:, None] - ey / gap)
    cost += np.where(has_motion[:, None], motion, 0.0)
    return cost


def greedy_accept(costs: np.ndarray, head_ids, threshold: float) -> list[tuple[int, int]]:
    """Accept (row, col) pairs cheapest first; ties by (head id, column)."""
    rows, cols = np.nonzero(costs < threshold)
    if rows.size == 0:
        return []
    vals = costs[rows, cols]
    hid = np.asarray(head_ids)[rows]
    order = np.lexsort((cols, hid, vals))
    used_r: set[int] = set()
    used_c: set[int] = set()
    out = []
    for k in order:
        r, c = int(rows[k]), int(cols[k])
        if r in used_r or c in used_c:
            continue
        used_r.add(r)
        used_c.add(c)
        out.append((r, c))
    return out


def _head_columns(heads: list[TrackHead]):
    n = len(heads)
    hx = np.empty(n); hy = np.empty(n); hc = np.empty(n); ha = np.empty(n)
    hmx = np.zeros(n); hmy = np.zeros(n); has = np.zeros(n, bool)
    hf = np.empty(n, np.int64)
    for i, h in enumerate(heads):
        d = h.last_detection
        hx[i], hy[i], hc[i], ha[i], hf[i] = d.x, d.y, int(d.cls), d.angle, d.frame
        if h.last_motion is not None:
            hmx[i], hmy[i] = h.last_motion
            has[i] = True
    return hx, hy, hc, ha, hmx, hmy, has, hf


def match_step(heads: list[TrackHead], detections: list[Detection],
               cfg: MatcherConfig) -> set[tuple[int, int]]:
    """Greedy matching of heads to detections of a single frame.

    Returns pairs ``(head_position, detection_position)`` indexing the input
    sequences.
    """
    if not heads or not detections:
        return set()
    frame = detections[0].frame
    if any(d.frame != frame for d in detections):
        raise ValueError("detections must share one frame")
    cols = _head_columns(heads)
    dx = np.array([d.x for d in detections])
    dy = np.array([d.y for d in detections])
    dc = np.array([int(d.cls) for d in detections], dtype=float)
    da = np.array([d.angle for d in detections])
    costs = cost_matrix(*cols, dx, dy, dc, da, frame, cfg)
    return set(greedy_accept(costs, [h.fragment_id for h in heads], cfg.cost_threshold))


def build_fragments(table: DetectionTable, cfg: MatcherConfig = MatcherConfig()
                    ) -> tuple[list[TrackFragment], list[Detection]]:
    arrays = table.arrays()
    frags, residual_rows = build_fragment_rows(arrays, cfg)
    dets = list(table)
    fragments = [TrackFragment(i, [dets[r] for r in rows], list(rows))
                 for i, rows in enumerate(frags)]
    residuals = [dets[r] for r in residual_rows]
    return fragments, residuals


def build_fragment_rows(a: DetectionArrays, cfg: MatcherConfig
                        ) -> tuple[list[list[int]], list[int]]:
    """Row-index core of build_fragments.

    Heads are kept as parallel numpy columns; head ids are creation order,
    which equals (frame, row) order of their seeding detection.
    """
    max_heads = len(a) + 1
    hx = np.empty(max_heads); hy = np.empty(max_heads)
    hc = np.empty(max_heads); ha = np.empty(max_heads)
    hmx = np.zeros(max_heads); hmy = np.zeros(max_heads)
    has = np.zeros(max_heads, bool)
    hf = np.empty(max_heads, np.int64)
    members: list[list[int]] = []
    active = np.empty(0, np.int64)
    closed: list[int] = []
    cls_f = a.cls.astype(np.float64)

    for k, f in enumerate(a.frame_ids):
        lo, hi = int(a.offsets[k]), int(a.offsets[k + 1])
        if active.size:
            alive = f - hf[active] <= cfg.max_gap
            closed.extend(active[~alive].tolist())
            active = active[alive]
        matched_cols = np.zeros(hi - lo, bool)
        if active.size and hi > lo:
            costs = cost_matrix(hx[active], hy[active], hc[active], ha[active],
                                hmx[active], hmy[active], has[active], hf[active],
                                a.x[lo:hi], a.y[lo:hi], cls_f[lo:hi], a.angle[lo:hi],
                                f, cfg)
            for r, c in greedy_accept(costs, active, cfg.cost_threshold):
                h = int(active[r])
                row = lo + c
                gap = f - hf[h]
                hmx[h] = (a.x[row] - hx[h]) / gap
                hmy[h] = (a.y[row] - hy[h]) / gap
                has[h] = True
                hx[h], hy[h], hc[h], ha[h], hf[h] = a.x[row], a.y[row], cls_f[row], a.angle[row], f
                members[h].append(row)
                matched_cols[c] = True
        new = np.nonzero(~matched_cols)[0]
        if new.size:
            start = len(members)
            ids = np.arange(start, start + new.size)
            rows = lo + new
            hx[ids], hy[ids], hc[ids], ha[ids] = a.x[rows], a.y[rows], cls_f[rows], a.angle[rows]
            hf[ids] = f
            has[ids] = False
            members.extend([[int(r)] for r in rows])
            active = np.concatenate([active, ids])
    closed.extend(active.tolist())

    kept = []
    residual_rows = []
    for h in closed:
        rows = members[h]
        if len(rows) > cfg.min_fragment_length:
            kept.append(rows)
        else:
            residual_rows.extend(rows)
    kept.sort(key=lambda rows: rows[0])
    residual_rows.sort()
    return kept, residual_rows


def select_initial_set(fragments: list[TrackFragment], table: DetectionTable,
                       window_seconds: float = 30.0, min_len: int = 100
                       ) -> tuple[int, list[int]]:
    """Frame within the opening window covered by the most long fragments."""
    window = int(round(window_seconds * table.fps))
    if window <= 0:
        raise NoInitialSetError("no initial set: empty window")
    first = min(table.frames) if table.frames else 0
    counts = np.zeros(window, np.int64)
    long_frags = [fr for fr in fragments if len(fr) > min_len]
    for fr in long_frags:
        lo = max(fr.first_frame - first, 0)
        hi = min(fr.last_frame - first, window - 1)
        if lo <= hi:
            counts[lo:hi + 1] += 1
    if not long_frags or counts.max() == 0:
        raise NoInitialSetError("no initial set: no fragment longer than "
                                f"{min_len} within the first {window_seconds} s")
    anchor = first + int(np.argmax(counts))
    ids = [fr.id for fr in long_frags if fr.first_frame <= anchor <= fr.last_frame]
    return anchor, ids


# -- CSV -----------------------------------------------------------------------

FRAGMENT_HEADER = "fragment_id,frame,x,y,class,angle"


def _row(fid: int, d: Detection) -> str:
    return f"{fid},{d.frame},{d.x:.6f},{d.y:.6f},{int(d.cls)},{d.angle:.6f}"


def write_fragments(fragments: list[TrackFragment], path) -> None:
    lines = [FRAGMENT_HEADER]
    for fr in fragments:
        lines.extend(_row(fr.id, d) for d in fr.detections)
    Path(path).write_text("\n".join(lines) + "\n")


def write_residuals(residuals: list[Detection], path) -> None:
    lines = [FRAGMENT_HEADER]
    lines.extend(_row(-1, d) for d in residuals)
    Path(path).write_text("\n".join(lines) + "\n")


def read_fragment_csv(path) -> tuple[list[TrackFragment], list[Detection]]:
    """Read a fragments or residuals file; rows with id -1 are residuals."""
    by_id: dict[int, list[Detection]] = {}
    residuals = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != FRAGMENT_HEADER:
            raise ValueError(f"{path}: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ValueError(f"{path}: expected 6 fields, line {lineno}")
            fid = int(parts[0])
            d = Detection(int(parts[1]), float(parts[2]), float(parts[3]),
                          ObjectClass(int(parts[4])), float(parts[5]))
            if fid < 0:
                residuals.append(d)
            else:
                by_id.setdefault(fid, []).append(d)
    fragments = [TrackFragment(fid, dets) for fid, dets in sorted(by_id.items())]
    return fragments, residuals
