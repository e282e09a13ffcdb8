"""Synthetic 2D hive: agent kinematics, rendered frames and noisy detections.

Rendering is analytic per pixel so any rectangular region of a frame can be
produced on its own and agrees bit for bit with the full frame.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .appearance import PATCH_SIZE
from .detections import (Detection, DetectionTable, FrameImage, ObjectClass,
                         frame_filename, read_detections, save_frame_image,
                         serialize_detections)
from .seeding import hash_uniform, substream

TWO_PI = 2.0 * math.pi
BODY_HALF_LENGTH = 30.0
BODY_HALF_WIDTH = 15.0
ABDOMEN_RADIUS = 25.0


class BundleError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentSpec:
    id: int
    mode: str = "walker"  # "walker" or "stationary"
    texture_seed: int = 0
    cell_schedule: tuple[tuple[int, int], ...] = ()  # [start, end) frames shown as abdomen
    occlusion_schedule: tuple[tuple[int, int], ...] = ()  # [start, end) frames without detection
    start: tuple[float, float, float] | None = None  # x, y, heading; drawn from the seed if None

    def __post_init__(self):
        if self.mode not in ("walker", "stationary"):
            raise ValueError(f"unknown agent mode {self.mode!r}")
        spans = sorted(list(self.cell_schedule) + list(self.occlusion_schedule))
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError(f"agent {self.id}: overlapping schedules")
        for a0, a1 in spans:
            if a0 < 0 or a1 <= a0:
                raise ValueError(f"agent {self.id}: bad interval ({a0}, {a1})")


@dataclass(frozen=True)
class HiveScenario:
    width: int = 512
    height: int = 512
    num_frames: int = 300
    fps: float = 10.0
    agents: tuple[AgentSpec, ...] = ()
    walker_speed: float = 2.0
    heading_persistence: float = 0.95
    jitter_sigma: float = 0.5
    seed: int = 0
    texture_similarity: float = 0.0
    margin: float = 40.0
    min_separation: float = 0.0

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if not 0.0 <= self.heading_persistence <= 1.0:
            raise ValueError("heading_persistence must lie in [0, 1]")
        if not 0.0 <= self.texture_similarity <= 1.0:
            raise ValueError("texture_similarity must lie in [0, 1]")
        if 2 * self.margin >= min(self.width, self.height):
            raise ValueError("margin leaves no room for agents")
        for a in self.agents:
            for s0, s1 in a.cell_schedule + a.occlusion_schedule:
                if s1 > self.num_frames:
                    raise ValueError(f"agent {a.id}: schedule beyond frame range")
            if a.start is not None:
                x, y, _ = a.start
                if not (0 <= x < self.width and 0 <= y < self.height):
                    raise ValueError(f"agent {a.id}: start outside bounds")


@dataclass(frozen=True)
class NoiseConfig:
    position_error_mean: float = 4.9
    angle_error_mean: float = 9.7  # degrees
    false_positive_rate: float = 0.06
    miss_rate: float = 0.02

    def __post_init__(self):
        if self.position_error_mean < 0 or self.angle_error_mean < 0:
            raise ValueError("errors must be non-negative")
        for r in (self.false_positive_rate, self.miss_rate):
            if not 0 <= r < 1:
                raise ValueError("rates must lie in [0, 1)")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class GroundTruth:
    """Pose arrays indexed [frame, agent]; agent column k is ``agent_ids[k]``."""

    agent_ids: list[int]
    x: np.ndarray
    y: np.ndarray
    angle: np.ndarray
    cls: np.ndarray
    visible: np.ndarray
    width: int
    height: int
    fps: float = 10.0

    @property
    def num_frames(self) -> int:
        return self.x.shape[0]

    def column(self, agent_id: int) -> int:
        return self.agent_ids.index(agent_id)

    def occlusions(self, agent_id: int) -> list[tuple[int, int]]:
        vis = self.visible[:, self.column(agent_id)]
        out = []
        start = None
        for f, v in enumerate(vis):
            if not v and start is None:
                start = f
            elif v and start is not None:
                out.append((start, f))
                start = None
        if start is not None:
            out.append((start, len(vis)))
        return out

    def equals(self, other: "GroundTruth") -> bool:
        return (self.agent_ids == other.agent_ids and self.width == other.width
                and self.height == other.height
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("x", "y", "angle", "cls", "visible")))


def _in_any(f: int, spans) -> bool:
    return any(a <= f < b for a, b in spans)


def _reflect(v: float, lo: float, hi: float) -> tuple[float, bool]:
    flipped = False
    while v < lo or v > hi:
        v = 2 * lo - v if v < lo else 2 * hi - v
        flipped = not flipped
    return v, flipped


def simulate(scenario: HiveScenario) -> GroundTruth:
    """Integrate every agent over the scenario, all agents advancing per frame.

    Walkers turn by ``(1 - persistence) * pi * N(0, 1)`` radians per frame and
    advance ``walker_speed`` pixels along the heading, reflecting off the
    margins. Stationary agents jitter around an anchor. While an agent sits
    in a cell (abdomen class) it keeps its position and reports angle 0.

    With ``min_separation > 0`` a walker whose step would bring it closer
    than that to another agent stays put and turns by a random angle, and
    seeded start positions respect the same spacing.
    """
    T, A = scenario.num_frames, len(scenario.agents)
    xs = np.zeros((T, A)); ys = np.zeros((T, A)); ang = np.zeros((T, A))
    cls = np.zeros((T, A), np.int64); vis = np.ones((T, A), bool)
    rng = substream(scenario.seed, "simulate")
    lo_x, hi_x = scenario.margin, scenario.width - 1 - scenario.margin
    lo_y, hi_y = scenario.margin, scenario.height - 1 - scenario.margin
    turn_sigma = (1.0 - scenario.heading_persistence) * math.pi
    sep2 = scenario.min_separation ** 2

    px = np.zeros(A); py = np.zeros(A); heading = np.zeros(A)
    for k, agent in enumerate(scenario.agents):
        if agent.start is not None:
            px[k], py[k], heading[k] = agent.start
            continue
        for _ in range(1000):
            px[k], py[k] = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
            d2 = (px[:k] - px[k]) ** 2 + (py[:k] - py[k]) ** 2
            if not sep2 or not (d2 < sep2).any():
                break
        heading[k] = rng.uniform(0, TWO_PI)
    anchor_x, anchor_y = px.copy(), py.copy()
    others = np.ones(A, bool)

    for t in range(T):
        for k, agent in enumerate(scenario.agents):
            in_cell = _in_any(t, agent.cell_schedule)
            h = heading[k]
            if t > 0 and agent.mode == "walker" and not in_cell:
                if turn_sigma > 0:
                    h += turn_sigma * rng.standard_normal()
                x = px[k] + scenario.walker_speed * math.cos(h)
                y = py[k] + scenario.walker_speed * math.sin(h)
                x, fx = _reflect(x, lo_x, hi_x)
                y, fy = _reflect(y, lo_y, hi_y)
                if fx:
                    h = math.pi - h
                if fy:
                    h = -h
                if sep2:
                    others[k] = False
                    d2 = (px[others] - x) ** 2 + (py[others] - y) ** 2
                    others[k] = True
                    if (d2 < sep2).any():
                        x, y = px[k], py[k]
                        h += rng.uniform(0.5 * math.pi, 1.5 * math.pi)
                px[k], py[k] = x, y
            elif agent.mode == "stationary" and scenario.jitter_sigma > 0:
                jx, jy = rng.standard_normal(2) * scenario.jitter_sigma
                px[k] = min(max(anchor_x[k] + jx, 0.0), scenario.width - 1e-6)
                py[k] = min(max(anchor_y[k] + jy, 0.0), scenario.height - 1e-6)
            heading[k] = h % TWO_PI
            xs[t, k], ys[t, k] = px[k], py[k]
            if in_cell:
                cls[t, k], ang[t, k] = int(ObjectClass.Abdomen), 0.0
            else:
                ang[t, k] = heading[k]
            vis[t, k] = not _in_any(t, agent.occlusion_schedule)
    return GroundTruth([a.id for a in scenario.agents], xs, ys, ang, cls, vis,
                       scenario.width, scenario.height, scenario.fps)


def make_scenario(num_agents: int = 10, width: int = 512, height: int = 512,
                  num_frames: int = 300, *, stationary_fraction: float = 0.3,
                  occlusion_fraction: float = 0.0, occlusion_min: int = 5,
                  occlusion_max: int = 40, abdomen_fraction: float = 0.0,
                  abdomen_min: int = 20, abdomen_max: int = 80, walker_speed: float = 2.0,
                  heading_persistence: float = 0.95, jitter_sigma: float = 0.5,
                  texture_similarity: float = 0.0, margin: float = 40.0,
                  min_separation: float = 0.0, fps: float = 10.0,
                  seed: int = 0) -> HiveScenario:
    """Draw agent specs: modes, texture seeds and schedules, from ``seed``.

    Occluded agents get one dropout interval each with a length drawn
    uniformly from [occlusion_min, occlusion_max] frames; abdomen agents get
    one cell visit in the same way.
    """
    rng = substream(seed, "agents")
    n_stat = int(round(stationary_fraction * num_agents))
    n_occ = int(round(occlusion_fraction * num_agents))
    n_abd = int(round(abdomen_fraction * num_agents))
    order = rng.permutation(num_agents)
    occluded = set(order[:n_occ].tolist())
    abdomen = set(order[n_occ:n_occ + n_abd].tolist())
    modes = ["stationary" if i < n_stat else "walker" for i in rng.permutation(num_agents)]
    tex = rng.integers(0, 2**31 - 1, size=num_agents)
    agents = []
    for i in range(num_agents):
        occ: tuple = ()
        cell: tuple = ()
        if i in occluded:
            length = int(rng.integers(occlusion_min, occlusion_max + 1))
            length = min(length, num_frames - 1)
            s = int(rng.integers(1, max(num_frames - length, 1) + 1))
            occ = ((s, min(s + length, num_frames)),)
        if i in abdomen:
            length = min(int(rng.integers(abdomen_min, abdomen_max + 1)), num_frames - 1)
            s = int(rng.integers(1, max(num_frames - length, 1) + 1))
            cell = ((s, min(s + length, num_frames)),)
        agents.append(AgentSpec(i, modes[i], int(tex[i]), cell, occ))
    return HiveScenario(width, height, num_frames, fps, tuple(agents), walker_speed,
                        heading_persistence, jitter_sigma, seed, texture_similarity, margin,
                        min_separation)


# -- rendering -----------------------------------------------------------------

@dataclass(frozen=True)
class Texture:
    core_level: float
    outer_level: float
    core_radius: float
    ring_period: float
    ring_amp: float

    @classmethod
    def from_seed(cls, seed: int) -> "Texture":
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(30, 235, size=2)
        return cls(float(a), float(b), float(rng.uniform(6, 12)),
                   float(rng.uniform(5, 10)), float(rng.uniform(10, 30)))

    def evaluate(self, u: np.ndarray, v: np.ndarray, similarity: float) -> np.ndarray:
        r = np.sqrt(u * u + v * v)
        level = np.where(r < self.core_radius, self.core_level, self.outer_level)
        phase = (r / self.ring_period) % 1.0
        own = level + self.ring_amp * (np.abs(2.0 * phase - 1.0) - 0.5)
        if similarity == 0.0:
            return own
        return (1.0 - similarity) * own + similarity * common_template(u, v)


def common_template(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Shared bee-like pattern: bright thorax, dark/bright abdomen bands."""
    band = np.where(((u + 60.0) / 5.0) % 2.0 < 1.0, 70.0, 170.0)
    return np.where(u > 8.0, 200.0, band)


class HiveRenderer:
    """Renders frames or frame regions of a simulated scenario."""

    def __init__(self, scenario: HiveScenario, truth: GroundTruth):
        self.scenario = scenario
        self.truth = truth
        self.textures = [Texture.from_seed(a.texture_seed) for a in scenario.agents]
        rng = substream(scenario.seed, "render")
        self._phases = rng.uniform(0, TWO_PI, size=3)
        self._bg_level = float(rng.uniform(85, 125))
        self._noise_key = int(rng.integers(0, 2**31 - 1))
        self._static: np.ndarray | None = None

    @property
    def width(self) -> int:
        return self.scenario.width

    @property
    def height(self) -> int:
        return self.scenario.height

    def _static_background(self) -> np.ndarray:
        if self._static is None:
            h, w = self.height, self.width
            yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
            k = TWO_PI / 22.0
            s = np.zeros((h, w))
            for i, th in enumerate((0.0, math.pi / 3, 2 * math.pi / 3)):
                s += np.cos(k * (xx * math.cos(th) + yy * math.sin(th)) + self._phases[i])
            grain = hash_uniform(self._noise_key, -1, yy.astype(np.int64), xx.astype(np.int64))
            self._static = (self._bg_level + 14.0 * s + 24.0 * (grain - 0.5)).astype(np.float32)
        return self._static

    def render_region(self, frame: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
        """Pixels [y0, y0+h) x [x0, x0+w) of ``frame``, zero outside the image."""
        out = np.zeros((h, w), np.uint8)
        ix0, iy0 = max(x0, 0), max(y0, 0)
        ix1, iy1 = min(x0 + w, self.width), min(y0 + h, self.height)
        if ix0 >= ix1 or iy0 >= iy1:
            return out
        region = self._static_background()[iy0:iy1, ix0:ix1].astype(np.float64)
        yy, xx = np.mgrid[iy0:iy1, ix0:ix1]
        u1 = hash_uniform(self._noise_key, frame, yy, xx)
        u2 = hash_uniform(self._noise_key + 1, frame, yy, xx)
        region = region + 8.0 * (u1 + u2 - 1.0)
        t = self.truth
        sim = self.scenario.texture_similarity
        reach = max(BODY_HALF_LENGTH, ABDOMEN_RADIUS) + 1
        for k in range(len(t.agent_ids)):
            if not t.visible[frame, k]:
                continue
            cx, cy = t.x[frame, k], t.y[frame, k]
            if cx + reach < ix0 or cx - reach >= ix1 or cy + reach < iy0 or cy - reach >= iy1:
                continue
            bx0 = max(int(math.floor(cx - reach)), ix0)
            bx1 = min(int(math.ceil(cx + reach)) + 1, ix1)
            by0 = max(int(math.floor(cy - reach)), iy0)
            by1 = min(int(math.ceil(cy + reach)) + 1, iy1)
            if bx0 >= bx1 or by0 >= by1:
                continue
            py, px = np.mgrid[by0:by1, bx0:bx1].astype(np.float64)
            dx, dy = px - cx, py - cy
            if t.cls[frame, k] == int(ObjectClass.Abdomen):
                u, v = dx, dy
                inside = u * u + v * v <= ABDOMEN_RADIUS ** 2
            else:
                c, s = math.cos(t.angle[frame, k]), math.sin(t.angle[frame, k])
                u = c * dx + s * dy
                v = -s * dx + c * dy
                inside = (u / BODY_HALF_LENGTH) ** 2 + (v / BODY_HALF_WIDTH) ** 2 <= 1.0
            if not inside.any():
                continue
            tex = self.textures[k].evaluate(u, v, sim)
            sub = region[by0 - iy0:by1 - iy0, bx0 - ix0:bx1 - ix0]
            sub[inside] = tex[inside]
        out[iy0 - y0:iy1 - y0, ix0 - x0:ix1 - x0] = np.clip(np.rint(region), 0, 255).astype(np.uint8)
        return out

    def render(self, frame: int) -> FrameImage:
        return FrameImage(self.width, self.height, self.render_region(frame, 0, 0, self.width, self.height))

    def patch(self, frame: int, x: float, y: float, size: int = PATCH_SIZE) -> np.ndarray:
        x0 = int(math.floor(x + 0.5)) - size // 2
        y0 = int(math.floor(y + 0.5)) - size // 2
        return self.render_region(frame, x0, y0, size, size)


def render_frames(truth: GroundTruth, scenario: HiveScenario) -> Iterable[FrameImage]:
    """Lazily render every frame in order."""
    renderer = HiveRenderer(scenario, truth)
    for f in range(truth.num_frames):
        yield renderer.render(f)


# -- detection noise -----------------------------------------------------------

@dataclass
class CorruptedDetections:
    table: DetectionTable
    false_positives: list[Detection]
    source_agent: list[int]  # per detection in table order; -1 for false positives


def corrupt_detections(truth: GroundTruth, noise: NoiseConfig, seed: int) -> CorruptedDetections:
    """Turn ground truth into a noisy detection table.

    Position noise is isotropic Gaussian with sigma = mean / sqrt(pi/2), so
    the mean radial error equals ``position_error_mean``. Angle noise is
    Gaussian with mean absolute deviation ``angle_error_mean``. Each frame
    gets fp_rate * (emitted true detections) false positives, the fractional
    part rounded stochastically.
    """
    rng = substream(seed, "noise")
    sigma = noise.position_error_mean / math.sqrt(math.pi / 2)
    angle_sigma = math.radians(noise.angle_error_mean) * math.sqrt(math.pi / 2)
    w, h = truth.width, truth.height
    xmax, ymax = np.nextafter(float(w), 0.0), np.nextafter(float(h), 0.0)
    frames: dict[int, list[Detection]] = {}
    source: list[int] = []
    fps_list: list[Detection] = []
    for f in range(truth.num_frames):
        dets = []
        for k, aid in enumerate(truth.agent_ids):
            if not truth.visible[f, k]:
                continue
            if rng.random() < noise.miss_rate:
                continue
            ex, ey = rng.standard_normal(2) * sigma
            ea = rng.standard_normal() * angle_sigma
            x = min(max(truth.x[f, k] + ex, 0.0), xmax)
            y = min(max(truth.y[f, k] + ey, 0.0), ymax)
            if truth.cls[f, k] == int(ObjectClass.Abdomen):
                c, a = ObjectClass.Abdomen, 0.0
            else:
                c, a = ObjectClass.FullBee, _wrap(truth.angle[f, k] + ea)
            dets.append(Detection(f, x, y, c, a))
            source.append(aid)
        expected = noise.false_positive_rate * len(dets)
        n_fp = int(math.floor(expected))
        if rng.random() < expected - n_fp:
            n_fp += 1
        for _ in range(n_fp):
            x = rng.uniform(0, w)
            y = rng.uniform(0, h)
            if rng.random() < 0.5:
                d = Detection(f, x, y, ObjectClass.Abdomen, 0.0)
            else:
                d = Detection(f, x, y, ObjectClass.FullBee, _wrap(rng.uniform(0, TWO_PI)))
            dets.append(d)
            fps_list.append(d)
            source.append(-1)
        if dets:
            frames[f] = dets
    table = DetectionTable(frames, frame_bounds=(w, h), fps=truth.fps)
    return CorruptedDetections(table, fps_list, source)


def _wrap(a: float) -> float:
    a = a % TWO_PI
    return 0.0 if a >= TWO_PI else a


# -- files ---------------------------------------------------------------------

TRUTH_HEADER = "agent_id,frame,x,y,class,angle,visible"


def serialize_truth(truth: GroundTruth) -> str:
    lines = [TRUTH_HEADER]
    for k, aid in enumerate(truth.agent_ids):
        for f in range(truth.num_frames):
            lines.append(f"{aid},{f},{truth.x[f, k]:.6f},{truth.y[f, k]:.6f},"
                         f"{int(truth.cls[f, k])},{truth.angle[f, k]:.6f},{int(truth.visible[f, k])}")
    return "\n".join(lines) + "\n"


def parse_truth(lines: Iterable[str], width: int, height: int, fps: float = 10.0,
                source: str = "truth", num_frames: int | None = None) -> GroundTruth:
    it = iter(lines)
    header = next(it, "").strip()
    if header != TRUTH_HEADER:
        raise BundleError(f"{source}: bad truth header {header!r}")
    rows = [line.strip().split(",") for line in it if line.strip()]
    if not rows:
        T = num_frames or 0
        empty = np.zeros((T, 0))
        return GroundTruth([], empty, empty.copy(), empty.copy(), np.zeros((T, 0), np.int64),
                           np.zeros((T, 0), bool), width, height, fps)
    data = np.array(rows, dtype=np.float64)
    ids = sorted({int(a) for a in data[:, 0]})
    T = max(int(data[:, 1].max()) + 1, num_frames or 0)
    col = np.searchsorted(ids, data[:, 0].astype(np.int64))
    f = data[:, 1].astype(np.int64)
    shape = (T, len(ids))
    xs, ys, ang = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    cls, vis = np.zeros(shape, np.int64), np.zeros(shape, bool)
    xs[f, col], ys[f, col] = data[:, 2], data[:, 3]
    cls[f, col], ang[f, col] = data[:, 4].astype(np.int64), data[:, 5]
    vis[f, col] = data[:, 6] != 0
    return GroundTruth(ids, xs, ys, ang, cls, vis, width, height, fps)


def read_truth(path, width: int, height: int, fps: float = 10.0,
               num_frames: int | None = None) -> GroundTruth:
    with open(path) as fh:
        return parse_truth(fh, width, height, fps, source=str(path), num_frames=num_frames)


def rounded_truth(truth: GroundTruth) -> GroundTruth:
    """Truth as it reads back from CSV (6-decimal values)."""
    return parse_truth(serialize_truth(truth).splitlines(), truth.width, truth.height, truth.fps,
                       num_frames=truth.num_frames)


def scenario_to_ini(scenario: HiveScenario, noise: NoiseConfig | None = None,
                    generator: dict | None = None) -> str:
    cp = configparser.ConfigParser()
    cp["scenario"] = {k: str(v) for k, v in asdict(scenario).items() if k != "agents"}
    if generator:
        cp["scenario"].update({k: str(v) for k, v in generator.items()})
    if noise is not None:
        cp["noise"] = {k: str(v) for k, v in asdict(noise).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


BUNDLE_FILES = ("detections.csv", "truth.csv", "false_positives.csv")


def write_scenario_bundle(truth: GroundTruth, frames: Iterable[FrameImage] | None,
                          detections: CorruptedDetections, directory, *,
                          scenario: HiveScenario | None = None,
                          noise: NoiseConfig | None = None, noise_seed: int | None = None
                          ) -> dict[str, str]:
    """Write frames, CSVs and ``manifest.txt``; returns the manifest entries."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        n_frames = 0
        if frames is not None:
            fdir = d / "frames"
            fdir.mkdir(exist_ok=True)
            for f, img in enumerate(frames):
                save_frame_image(img, fdir / frame_filename(f))
                n_frames += 1
        (d / "detections.csv").write_text(serialize_detections(detections.table))
        (d / "truth.csv").write_text(serialize_truth(truth))
        fp_table = DetectionTable.from_detections(detections.false_positives)
        (d / "false_positives.csv").write_text(serialize_detections(fp_table))
    except OSError as exc:
        raise BundleError(f"cannot write bundle at {exc.filename or d}: {exc.strerror}") from exc
    manifest = {
        "width": str(truth.width),
        "height": str(truth.height),
        "fps": str(truth.fps),
        "num_frames": str(truth.num_frames),
        "num_agents": str(len(truth.agent_ids)),
        "rendered_frames": str(n_frames),
    }
    if scenario is not None:
        manifest["scenario_seed"] = str(scenario.seed)
        for k, v in asdict(scenario).items():
            if k not in ("agents", "seed"):
                manifest[f"scenario.{k}"] = str(v)
    if noise is not None:
        for k, v in asdict(noise).items():
            manifest[f"noise.{k}"] = str(v)
    if noise_seed is not None:
        manifest["noise_seed"] = str(noise_seed)
    for name in BUNDLE_FILES:
        manifest[f"sha256.{name}"] = _sha256(d / name)
    write_manifest(manifest, d / "manifest.txt")
    return manifest


def write_manifest(entries: dict[str, str], path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


@dataclass
class ScenarioBundle:
    truth: GroundTruth
    detections: DetectionTable
    false_positives: list[Detection]
    manifest: dict[str, str]
    directory: Path

    @property
    def frames_dir(self) -> Path:
        return self.directory / "frames"


def load_scenario_bundle(directory, expected_seed: int | None = None) -> ScenarioBundle:
    d = Path(directory)
    mpath = d / "manifest.txt"
    if not mpath.exists():
        raise BundleError(f"missing manifest: {mpath}")
    manifest = read_manifest(mpath)
    if expected_seed is not None and manifest.get("scenario_seed") != str(expected_seed):
        raise BundleError(f"manifest seed {manifest.get('scenario_seed')} does not match "
                          f"expected seed {expected_seed}")
    for name in BUNDLE_FILES:
        p = d / name
        if not p.exists():
            raise BundleError(f"missing bundle file: {p}")
        want = manifest.get(f"sha256.{name}")
        if want is not None and want != _sha256(p):
            raise BundleError(f"checksum mismatch for {p}")
    w, h = int(manifest["width"]), int(manifest["height"])
    fps = float(manifest.get("fps", 10.0))
    table = read_detections(d / "detections.csv", frame_bounds=(w, h), fps=fps)
    fps_table = read_detections(d / "false_positives.csv")
    truth = read_truth(d / "truth.csv", w, h, fps, int(manifest.get("num_frames", 0)))
    return ScenarioBundle(truth, table, list(fps_table), manifest, d)
