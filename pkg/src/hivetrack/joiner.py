"""Iterative train/match loop joining fragments into full trajectories.

Each iteration trains the identity classifier until its batch loss drops
below the gate, then runs one matching round: every active trajectory probes
the frame ``end + d_t`` for gated candidates, scores them against its own
label and commits the best one above the cutoff. A committed fragment head
pulls the whole fragment into the trajectory.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .appearance import (BACKGROUND, PATCH_SIZE, ClassifierConfig, ClassifierState, Patch,
                         TrainBuffer, crop, featurize_array, score_many, train_step)
from .detections import (Detection, DetectionArrays, DetectionTable, ObjectClass,
                         frame_filename, load_frame_image)
from .fragments import NoInitialSetError, TrackFragment
from .seeding import substream

log = logging.getLogger(__name__)

SINGLE = -1


@dataclass(frozen=True)
class JoinerConfig:
    gate_scale: float = 80.0
    score_cutoff: float = 0.1
    fragment_head_window: int = 10
    stall_limit: int = 50
    completion_span: float = 0.95
    loss_gate: float = 0.01
    phase1_iterations: int = 100
    phase2_iterations: int = 900
    phase1_fraction: float = 0.5
    buffer_size: int = 250
    background_pool: int = 10_000
    max_train_steps: int = 20_000
    workers: int = 1

    def __post_init__(self):
        if min(self.gate_scale, self.score_cutoff, self.fragment_head_window, self.stall_limit,
               self.loss_gate, self.buffer_size, self.max_train_steps, self.workers) <= 0:
            raise ValueError("joiner parameters must be positive")
        if self.phase1_iterations < 0 or self.phase2_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if not 0 < self.completion_span <= 1 or not 0 < self.phase1_fraction <= 1:
            raise ValueError("completion_span and phase1_fraction must lie in (0, 1]")


class Status(str, enum.Enum):
    Active = "active"
    Complete = "complete"
    Stalled = "stalled"
    Pending = "pending"  # initial identity waiting for phase 2


class OwnershipConflict(RuntimeError):
    pass


class FrameSource(Protocol):
    width: int
    height: int

    def patch(self, frame: int, x: float, y: float, size: int = PATCH_SIZE) -> np.ndarray: ...


class DirectoryFrames:
    """PGM frames ``frame_%06d.pgm`` in a directory, with a small decode cache."""

    def __init__(self, directory, cache_size: int = 32):
        self.directory = Path(directory)
        files = sorted(self.directory.glob("frame_*.pgm"))
        if not files:
            raise FileNotFoundError(f"no frame_*.pgm files in {self.directory}")
        first = load_frame_image(files[0])
        self.width, self.height = first.width, first.height
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cache_size = cache_size

    def frame(self, f: int) -> np.ndarray:
        if f in self._cache:
            self._cache.move_to_end(f)
            return self._cache[f]
        img = load_frame_image(self.directory / frame_filename(f)).intensities
        self._cache[f] = img
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return img

    def patch(self, frame: int, x: float, y: float, size: int = PATCH_SIZE) -> np.ndarray:
        return crop(self.frame(frame), x, y, size)


# -- state ---------------------------------------------------------------------

@dataclass
class Trajectory:
    id: int
    rows: list[int]
    sources: list[int]  # fragment id per entry, SINGLE for single detections
    gap_counter: int = 1
    stall_counter: int = 0
    status: Status = Status.Active

    @property
    def num_entries(self) -> int:
        return len(self.rows)


@dataclass
class AssignmentLedger:
    owner: np.ndarray  # per detection row, -1 when unowned
    fragment_of: np.ndarray  # per row, SINGLE for residuals
    position_in_fragment: np.ndarray
    released: np.ndarray  # rows dropped from an absorbed fragment
    fragment_rows: dict[int, list[int]]
    absorbed_by: dict[int, int] = field(default_factory=dict)  # fragment id -> trajectory id

    def is_free_fragment(self, fid: int) -> bool:
        return fid not in self.absorbed_by

    def claim(self, rows: Sequence[int], tid: int) -> None:
        rows = np.asarray(rows, np.int64)
        if rows.size and (self.owner[rows] != -1).any():
            raise OwnershipConflict(f"trajectory {tid}: detection already owned")
        self.owner[rows] = tid


@dataclass
class JoinProblem:
    """All detections (fragments plus residuals) as frame-sorted columns."""

    det: DetectionArrays
    ledger: AssignmentLedger
    num_frames: int
    fragments: dict[int, list[int]]

    @classmethod
    def build(cls, fragments: Sequence[TrackFragment], residuals: Sequence[Detection],
              num_frames: int | None = None) -> "JoinProblem":
        items: list[tuple[Detection, int, int]] = []
        for fr in fragments:
            items.extend((d, fr.id, i) for i, d in enumerate(fr.detections))
        items.extend((d, SINGLE, -1) for d in residuals)
        items.sort(key=lambda it: (it[0].frame, it[0].x, it[0].y, int(it[0].cls), it[0].angle))
        table = DetectionTable.from_detections([it[0] for it in items])
        det = table.arrays()
        frag_of = np.array([it[1] for it in items], np.int64)
        pos = np.array([it[2] for it in items], np.int64)
        n = len(items)
        frag_rows: dict[int, list[int]] = {}
        for r, (_, fid, _) in enumerate(items):
            if fid != SINGLE:
                frag_rows.setdefault(fid, []).append(r)
        ledger = AssignmentLedger(np.full(n, -1, np.int64), frag_of, pos, np.zeros(n, bool),
                                  frag_rows)
        if num_frames is None:
            num_frames = int(det.frame.max()) + 1 if n else 0
        return cls(det, ledger, num_frames, frag_rows)

    def detection(self, row: int) -> Detection:
        d = self.det
        return Detection(int(d.frame[row]), float(d.x[row]), float(d.y[row]),
                         ObjectClass(int(d.cls[row])), float(d.angle[row]))


# -- matching primitives -------------------------------------------------------

def end_of(problem: JoinProblem, traj: Trajectory) -> tuple[int, float, float]:
    r = traj.rows[-1]
    return int(problem.det.frame[r]), float(problem.det.x[r]), float(problem.det.y[r])


def candidate_gate(problem: JoinProblem, traj: Trajectory, frame: int,
                   cfg: JoinerConfig) -> list[int]:
    """Rows in ``frame`` that are unowned, eligible and within D*sqrt(d_t)."""
    if traj.gap_counter < 1:
        raise ValueError("gap counter must be >= 1")
    sl = problem.det.rows_of_frame(frame)
    if sl.start == sl.stop:
        return []
    led = problem.ledger
    rows = np.arange(sl.start, sl.stop)
    _, px, py = end_of(problem, traj)
    fid = led.fragment_of[rows]
    head_ok = np.array([f != SINGLE and led.is_free_fragment(int(f)) for f in fid], bool)
    eligible = (fid == SINGLE) | led.released[rows] | (
        head_ok & (led.position_in_fragment[rows] < cfg.fragment_head_window))
    eligible &= led.owner[rows] == -1
    ex = problem.det.x[rows] - px
    ey = problem.det.y[rows] - py
    radius = cfg.gate_scale * math.sqrt(traj.gap_counter)
    eligible &= np.sqrt(ex * ex + ey * ey) <= radius
    return rows[eligible].tolist()


def select_extension(candidates: Sequence[int], scores: Sequence[float],
                     cutoff: float = 0.1) -> int | None:
    """Best-scoring candidate if its score is strictly above ``cutoff``."""
    best, best_score = None, -math.inf
    for row, s in sorted(zip(candidates, scores)):
        if s > best_score:
            best, best_score = row, s
    if best is None or not best_score > cutoff:
        return None
    return best


@dataclass
class CommitResult:
    appended: list[int]
    released: list[int]


def commit_extension(problem: JoinProblem, traj: Trajectory, chosen: int,
                     cfg: JoinerConfig, buffer: TrainBuffer | None = None,
                     frames: FrameSource | None = None) -> CommitResult:
    """Append ``chosen`` (or its whole fragment) to ``traj``.

    Fragment detections at frames up to the current trajectory end are
    released back as single detections so frames stay strictly increasing.
    """
    led = problem.ledger
    if led.owner[chosen] != -1:
        raise OwnershipConflict(f"detection {chosen} already owned")
    end_frame = end_of(problem, traj)[0]
    fid = int(led.fragment_of[chosen])
    if fid == SINGLE or led.released[chosen]:
        appended, released, source = [chosen], [], SINGLE
    else:
        if not led.is_free_fragment(fid):
            raise OwnershipConflict(f"fragment {fid} already absorbed")
        rows = led.fragment_rows[fid]
        appended = [r for r in rows if problem.det.frame[r] > end_frame]
        released = [r for r in rows if problem.det.frame[r] <= end_frame]
        source = fid
    if problem.det.frame[appended[0]] <= end_frame:
        raise ValueError("extension does not advance the trajectory")
    led.claim(appended, traj.id)
    if source != SINGLE:
        led.absorbed_by[source] = traj.id
        led.released[released] = True
    traj.rows.extend(appended)
    traj.sources.extend([source] * len(appended))
    traj.gap_counter = 1
    traj.stall_counter = 0
    if buffer is not None and frames is not None and traj.id in buffer:
        buffer.update(traj.id, [row_patch(problem, frames, r) for r in appended[-buffer.size:]])
    if span_fraction(problem, traj) > cfg.completion_span:
        traj.status = Status.Complete
    return CommitResult(appended, released)


def span_fraction(problem: JoinProblem, traj: Trajectory) -> float:
    if problem.num_frames == 0:
        return 0.0
    f = problem.det.frame
    return (int(f[traj.rows[-1]]) - int(f[traj.rows[0]]) + 1) / problem.num_frames


def row_patch(problem: JoinProblem, frames: FrameSource, row: int) -> Patch:
    d = problem.det
    f, x, y = int(d.frame[row]), float(d.x[row]), float(d.y[row])
    return Patch(frames.patch(f, x, y), f, (x, y))


# -- the loop ------------------------------------------------------------------

@dataclass
class RoundStats:
    extensions: int = 0
    completions: int = 0
    stalls: int = 0


@dataclass
class JoinState:
    problem: JoinProblem
    trajectories: dict[int, Trajectory]
    classifier: ClassifierState
    buffer: TrainBuffer
    frames: FrameSource
    cfg: JoinerConfig
    classifier_cfg: ClassifierConfig
    rng: np.random.Generator
    log_lines: list[str] = field(default_factory=list)
    iteration: int = 0
    conflicts: int = 0

    def retire(self, traj: Trajectory) -> None:
        if traj.id in self.classifier.labels:
            self.classifier.remove_label(traj.id)
        if traj.id in self.buffer:
            self.buffer.remove(traj.id)

    def activate(self, traj: Trajectory) -> None:
        traj.status = Status.Active
        self.classifier.add_label(traj.id)
        rows = traj.rows[-self.buffer.size:]
        self.buffer.fill(traj.id, [row_patch(self.problem, self.frames, r) for r in rows])


def _features(problem: JoinProblem, frames: FrameSource, rows: Sequence[int]) -> np.ndarray:
    return np.stack([featurize_array(row_patch(problem, frames, r).pixels) for r in rows])


def matching_round(state: JoinState) -> RoundStats:
    """One deterministic pass over the active trajectories.

    Order is ascending d_t, then id. Candidate features for the round-start
    gate may be computed by a worker pool; selection and commits run
    serially, re-gating against the live ledger, so the worker count never
    changes an outcome.
    """
    problem, cfg = state.problem, state.cfg
    stats = RoundStats()
    active = sorted((t for t in state.trajectories.values() if t.status == Status.Active),
                    key=lambda t: (t.gap_counter, t.id))
    if not active:
        return stats
    probes = {t.id: end_of(problem, t)[0] + t.gap_counter for t in active}
    cache: dict[int, np.ndarray] = {}
    prefetch = sorted({r for t in active for r in candidate_gate(problem, t, probes[t.id], cfg)})
    if prefetch:
        if cfg.workers > 1 and len(prefetch) > 1:
            chunks = [prefetch[i::cfg.workers] for i in range(cfg.workers)]
            with ThreadPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(lambda rows: _features(problem, state.frames, rows)
                                        if rows else None, chunks))
            for rows, feats in zip(chunks, results):
                if feats is not None:
                    cache.update(zip(rows, feats))
        else:
            cache.update(zip(prefetch, _features(problem, state.frames, prefetch)))

    weights_snapshot = ClassifierState(state.classifier.weights.copy(),
                                       labels=list(state.classifier.labels))
    label_index = weights_snapshot.label_index
    for traj in active:
        cands = candidate_gate(problem, traj, probes[traj.id], cfg)
        chosen = None
        if cands:
            missing = [r for r in cands if r not in cache]
            if missing:
                cache.update(zip(missing, _features(problem, state.frames, missing)))
            feats = np.stack([cache[r] for r in cands])
            probs = score_many(weights_snapshot, feats)[:, label_index[traj.id]]
            chosen = select_extension(cands, probs.tolist(), cfg.score_cutoff)
        if chosen is not None:
            try:
                commit_extension(problem, traj, chosen, cfg, state.buffer, state.frames)
            except OwnershipConflict:
                state.conflicts += 1
                chosen = None
        if chosen is not None:
            stats.extensions += 1
            if traj.status == Status.Complete:
                stats.completions += 1
                state.retire(traj)
            continue
        traj.gap_counter += 1
        traj.stall_counter += 1
        if traj.stall_counter >= cfg.stall_limit:
            traj.status = Status.Stalled
            stats.stalls += 1
            state.retire(traj)
    return stats


def train_until_gate(state: JoinState) -> tuple[int, float]:
    """Train until a batch loss falls below the gate or the step cap is hit."""
    clf, ccfg = state.classifier, state.classifier_cfg
    if len(clf.labels) < 2:
        return 0, float("nan")
    loss = math.inf
    steps = 0
    while steps < state.cfg.max_train_steps:
        loss = train_step(clf, state.buffer, ccfg, state.rng)
        steps += 1
        if loss < state.cfg.loss_gate:
            break
    else:
        log.warning("iteration %d: loss %.4f still above gate after %d steps",
                    state.iteration, loss, steps)
    return steps, loss


def sample_background(problem: JoinProblem, frames: FrameSource, cfg: JoinerConfig,
                      rng: np.random.Generator, clearance: float = 30.0,
                      max_attempts: int | None = None) -> list[Patch]:
    """Patches centered away from every detection of their frame.

    Collects ``cfg.background_pool`` candidate centers and keeps
    ``cfg.buffer_size`` of them chosen uniformly.
    """
    det = problem.det
    frame_ids = det.frame_ids
    if len(frame_ids) == 0:
        raise ValueError("no frames to sample background from")
    half = PATCH_SIZE / 2
    lo_x, hi_x = half, max(frames.width - half, half + 1)
    lo_y, hi_y = half, max(frames.height - half, half + 1)
    pool: list[tuple[int, float, float]] = []
    attempts = 0
    max_attempts = max_attempts or 50 * cfg.background_pool
    while len(pool) < cfg.background_pool and attempts < max_attempts:
        attempts += 1
        f = int(frame_ids[rng.integers(len(frame_ids))])
        x, y = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        sl = det.rows_of_frame(f)
        dx, dy = det.x[sl] - x, det.y[sl] - y
        if dx.size and np.min(dx * dx + dy * dy) < clearance ** 2:
            continue
        pool.append((f, x, y))
    if len(pool) < cfg.buffer_size:
        raise RuntimeError(f"only {len(pool)} background locations found")
    keep = np.sort(rng.choice(len(pool), size=cfg.buffer_size, replace=False))
    chosen = sorted((pool[i] for i in keep), key=lambda p: p[0])
    return [Patch(frames.patch(f, x, y), f, (x, y)) for f, x, y in chosen]


@dataclass
class JoinResult:
    trajectories: list[Trajectory]
    problem: JoinProblem
    log_lines: list[str]
    classifier: ClassifierState
    conflicts: int = 0


def init_join_state(problem: JoinProblem, initial_ids: Sequence[int], frames: FrameSource,
                    cfg: JoinerConfig, classifier_cfg: ClassifierConfig, seed: int) -> JoinState:
    if not initial_ids:
        raise NoInitialSetError("no initial set")
    trajectories: dict[int, Trajectory] = {}
    for fid in initial_ids:
        rows = list(problem.fragments[fid])
        problem.ledger.claim(rows, fid)
        problem.ledger.absorbed_by[fid] = fid
        trajectories[fid] = Trajectory(fid, rows, [fid] * len(rows), status=Status.Pending)
    buffer = TrainBuffer(cfg.buffer_size)
    state = JoinState(problem, trajectories, ClassifierState(), buffer, frames, cfg,
                      classifier_cfg, substream(seed, "train"))
    bg = sample_background(problem, frames, cfg, substream(seed, "background"))
    state.classifier.add_label(BACKGROUND)
    buffer.fill(BACKGROUND, bg)
    for t in trajectories.values():
        if span_fraction(problem, t) > cfg.completion_span:
            t.status = Status.Complete
    return state


def exhausted(state: JoinState, traj: Trajectory) -> bool:
    """True once the probed frame lies past the recording; no later round can extend it."""
    return end_of(state.problem, traj)[0] + traj.gap_counter >= state.problem.num_frames


def run_iterations(state: JoinState, n: int) -> None:
    for _ in range(n):
        active = [t for t in state.trajectories.values() if t.status == Status.Active]
        if not active:
            break
        if all(exhausted(state, t) for t in active):
            # training cannot change any outcome any more; rounds only count stalls
            steps, loss = 0, float("nan")
        else:
            steps, loss = train_until_gate(state)
        stats = matching_round(state)
        line = (f"iteration={state.iteration} train_steps={steps} loss={loss:.6f} "
                f"extensions={stats.extensions} completions={stats.completions} "
                f"stalls={stats.stalls}")
        state.log_lines.append(line)
        log.info(line)
        state.iteration += 1


def run_joining(fragments: Sequence[TrackFragment], residuals: Sequence[Detection],
                initial_set: Sequence[int], frames: FrameSource,
                cfg: JoinerConfig = JoinerConfig(),
                classifier_cfg: ClassifierConfig = ClassifierConfig(),
                seed: int = 0, num_frames: int | None = None) -> JoinResult:
    """Two-phase joining schedule.

    Phase 1 runs the longest ceil(phase1_fraction * K) initial identities;
    phase 2 adds every identity that is not yet finished.
    """
    problem = JoinProblem.build(fragments, residuals, num_frames)
    state = init_join_state(problem, initial_set, frames, cfg, classifier_cfg, seed)
    ranked = sorted(state.trajectories.values(), key=lambda t: (-t.num_entries, t.id))
    k1 = math.ceil(cfg.phase1_fraction * len(ranked))
    for t in ranked[:k1]:
        if t.status == Status.Pending:
            state.activate(t)
    run_iterations(state, cfg.phase1_iterations)
    for t in ranked[k1:]:
        if t.status == Status.Pending:
            state.activate(t)
    run_iterations(state, cfg.phase2_iterations)
    for t in state.trajectories.values():
        if t.status == Status.Pending:
            t.status = Status.Active
    return JoinResult(sorted(state.trajectories.values(), key=lambda t: t.id), problem,
                      state.log_lines, state.classifier, state.conflicts)


# -- invariants and output -------------------------------------------------------

def check_conservation(result: JoinResult) -> None:
    """Every detection is in exactly one of: a trajectory, an unabsorbed
    fragment, or the unowned singles. Raises AssertionError otherwise."""
    problem = result.problem
    led = problem.ledger
    n = len(problem.det)
    count = np.zeros(n, np.int64)
    for t in result.trajectories:
        np.add.at(count, np.asarray(t.rows, np.int64), 1)
        frames = problem.det.frame[t.rows]
        if len(frames) > 1 and not np.all(np.diff(frames) > 0):
            raise AssertionError(f"trajectory {t.id} frames not strictly increasing")
        if not np.all(led.owner[t.rows] == t.id):
            raise AssertionError(f"trajectory {t.id} entries not owned by it")
    for fid, rows in problem.fragments.items():
        if led.is_free_fragment(fid):
            np.add.at(count, np.asarray(rows, np.int64), 1)
    singles = ((led.fragment_of == SINGLE) | led.released) & (led.owner == -1)
    count[singles] += 1
    if not np.all(count == 1):
        bad = np.nonzero(count != 1)[0]
        raise AssertionError(f"{bad.size} detections not accounted exactly once, e.g. row {bad[0]}")


TRAJECTORY_HEADER = "trajectory_id,frame,x,y,class,angle,source"
STATUS_HEADER = "trajectory_id,status,first_frame,last_frame,num_entries"


def trajectory_lines(result: JoinResult) -> list[str]:
    d = result.problem.det
    lines = [TRAJECTORY_HEADER]
    for t in result.trajectories:
        for r, src in zip(t.rows, t.sources):
            source = "single" if src == SINGLE else f"fragment:{src}"
            lines.append(f"{t.id},{d.frame[r]},{d.x[r]:.6f},{d.y[r]:.6f},{d.cls[r]},"
                         f"{d.angle[r]:.6f},{source}")
    return lines


def status_lines(result: JoinResult) -> list[str]:
    d = result.problem.det
    lines = [STATUS_HEADER]
    for t in result.trajectories:
        lines.append(f"{t.id},{t.status.value},{d.frame[t.rows[0]]},{d.frame[t.rows[-1]]},"
                     f"{t.num_entries}")
    return lines


def write_trajectories(result: JoinResult, path, status_path=None) -> None:
    Path(path).write_text("\n".join(trajectory_lines(result)) + "\n")
    if status_path is not None:
        Path(status_path).write_text("\n".join(status_lines(result)) + "\n")


@dataclass
class TrajectoryRecord:
    """A trajectory as read back from CSV."""

    id: int
    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    cls: np.ndarray
    angle: np.ndarray
    source: list[str]


def read_trajectories(path) -> list[TrajectoryRecord]:
    by_id: dict[int, list[list[str]]] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TRAJECTORY_HEADER:
            raise ValueError(f"{path}: bad trajectory header {header!r}")
        for line in fh:
            if line.strip():
                parts = line.strip().split(",")
                by_id.setdefault(int(parts[0]), []).append(parts)
    out = []
    for tid, rows in sorted(by_id.items()):
        out.append(TrajectoryRecord(
            tid,
            np.array([int(r[1]) for r in rows]),
            np.array([float(r[2]) for r in rows]),
            np.array([float(r[3]) for r in rows]),
            np.array([int(r[4]) for r in rows]),
            np.array([float(r[5]) for r in rows]),
            [r[6] for r in rows],
        ))
    return out


def records_from_result(result: JoinResult) -> list[TrajectoryRecord]:
    d = result.problem.det
    out = []
    for t in result.trajectories:
        r = np.asarray(t.rows, np.int64)
        src = ["single" if s == SINGLE else f"fragment:{s}" for s in t.sources]
        out.append(TrajectoryRecord(t.id, d.frame[r].copy(), d.x[r].copy(), d.y[r].copy(),
                                    d.cls[r].copy(), d.angle[r].copy(), src))
    return out
