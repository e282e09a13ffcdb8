"""Detection data model, CSV tables and PGM frame images."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

TWO_PI = 2.0 * math.pi
CSV_HEADER = ["frame", "x", "y", "class", "angle"]


class DetectionError(ValueError):
    """Raised for malformed detection input."""


class ImageFormatError(ValueError):
    """Raised for PGM files this module cannot decode."""


class ObjectClass(enum.IntEnum):
    FullBee = 0
    Abdomen = 1


@dataclass(frozen=True, slots=True)
class Detection:
    frame: int
    x: float
    y: float
    cls: ObjectClass
    angle: float

    def __post_init__(self):
        if self.frame < 0:
            raise DetectionError(f"negative frame index {self.frame}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DetectionError("non-finite position")
        if not 0.0 <= self.angle < TWO_PI:
            raise DetectionError(f"angle {self.angle} outside [0, 2pi)")
        if self.cls == ObjectClass.Abdomen and self.angle != 0.0:
            raise DetectionError("abdomen with nonzero angle")


@dataclass
class FrameImage:
    width: int
    height: int
    intensities: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        arr = np.asarray(self.intensities)
        if arr.shape != (self.height, self.width):
            raise ImageFormatError(
                f"image shape {arr.shape} does not match {self.height}x{self.width}"
            )
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ImageFormatError("intensities outside [0, 255]")
            arr = arr.astype(np.uint8)
        self.intensities = arr


@dataclass
class DetectionTable:
    """Detections grouped by frame, iterated in ascending frame order."""

    frames: dict[int, list[Detection]] = field(default_factory=dict)
    frame_bounds: tuple[float, float] | None = None
    fps: float = 10.0

    def __post_init__(self):
        self.frames = {f: list(self.frames[f]) for f in sorted(self.frames)}
        for f, dets in self.frames.items():
            for d in dets:
                if d.frame != f:
                    raise DetectionError(f"detection of frame {d.frame} filed under {f}")

    @classmethod
    def from_detections(cls, detections: Iterable[Detection], **kwargs) -> "DetectionTable":
        frames: dict[int, list[Detection]] = {}
        for d in detections:
            frames.setdefault(d.frame, []).append(d)
        return cls(frames=frames, **kwargs)

    def __iter__(self):
        for dets in self.frames.values():
            yield from dets

    def __len__(self) -> int:
        return sum(len(v) for v in self.frames.values())

    @property
    def num_frames(self) -> int:
        """Frame count assuming the recording starts at frame 0."""
        return (max(self.frames) + 1) if self.frames else 0

    def arrays(self) -> "DetectionArrays":
        return DetectionArrays.from_table(self)


@dataclass
class DetectionArrays:
    """Column view of a table; row i is the i-th detection in iteration order."""

    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    cls: np.ndarray
    angle: np.ndarray
    frame_ids: np.ndarray  # distinct frames, ascending
    offsets: np.ndarray  # rows of frame_ids[k] are offsets[k]:offsets[k+1]

    @classmethod
    def from_table(cls, table: DetectionTable) -> "DetectionArrays":
        dets = list(table)
        n = len(dets)
        frame = np.fromiter((d.frame for d in dets), dtype=np.int64, count=n)
        x = np.fromiter((d.x for d in dets), dtype=np.float64, count=n)
        y = np.fromiter((d.y for d in dets), dtype=np.float64, count=n)
        c = np.fromiter((int(d.cls) for d in dets), dtype=np.int64, count=n)
        a = np.fromiter((d.angle for d in dets), dtype=np.float64, count=n)
        frame_ids = np.fromiter(table.frames.keys(), dtype=np.int64, count=len(table.frames))
        counts = np.fromiter((len(v) for v in table.frames.values()), dtype=np.int64,
                             count=len(table.frames))
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(frame, x, y, c, a, frame_ids, offsets)

    def __len__(self) -> int:
        return len(self.frame)

    def rows_of_frame(self, f: int) -> slice:
        k = np.searchsorted(self.frame_ids, f)
        if k >= len(self.frame_ids) or self.frame_ids[k] != f:
            return slice(0, 0)
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))


def _parse_row(row: list[str], lineno: int) -> Detection:
    if len(row) != 5:
        raise DetectionError(f"expected 5 fields, got {len(row)}, line {lineno}")
    try:
        frame = int(row[0])
        x, y = float(row[1]), float(row[2])
        cls_value = int(row[3])
        angle = float(row[4])
    except ValueError:
        raise DetectionError(f"non-numeric field, line {lineno}") from None
    if cls_value not in (0, 1):
        raise DetectionError(f"class {cls_value} outside {{0,1}}, line {lineno}")
    if not 0.0 <= angle < TWO_PI:
        raise DetectionError(f"angle {angle} outside [0, 2pi), line {lineno}")
    if cls_value == 1 and angle != 0.0:
        raise DetectionError(f"abdomen with nonzero angle, line {lineno}")
    try:
        return Detection(frame, x, y, ObjectClass(cls_value), angle)
    except DetectionError as exc:
        raise DetectionError(f"{exc}, line {lineno}") from None


def parse_detections(stream: TextIO, frame_bounds=None, fps: float = 10.0) -> DetectionTable:
    """Parse a ``frame,x,y,class,angle`` CSV stream. Aborts on the first bad row."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != CSV_HEADER:
        raise DetectionError(f"bad header {header!r}, line 1")
    dets = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        dets.append(_parse_row(row, lineno))
    # stable sort keeps the within-frame input order
    dets.sort(key=lambda d: d.frame)
    return DetectionTable.from_detections(dets, frame_bounds=frame_bounds, fps=fps)


def read_detections(path, frame_bounds=None, fps: float = 10.0) -> DetectionTable:
    with open(path, newline="") as fh:
        return parse_detections(fh, frame_bounds=frame_bounds, fps=fps)


def format_detection_row(d: Detection) -> str:
    return f"{d.frame},{d.x:.6f},{d.y:.6f},{int(d.cls)},{d.angle:.6f}"


def serialize_detections(table: DetectionTable) -> str:
    out = io.StringIO()
    out.write(",".join(CSV_HEADER) + "\n")
    for d in table:
        out.write(format_detection_row(d) + "\n")
    return out.getvalue()


def write_detections(table: DetectionTable, path) -> None:
    Path(path).write_text(serialize_detections(table))


@dataclass
class ValidationReport:
    out_of_bounds: list[Detection]
    empty_frames: list[int]
    counts: dict[int, int]
    mean_count: float
    std_count: float

    @property
    def violations(self) -> int:
        return len(self.out_of_bounds)


def validate_table(table: DetectionTable, bounds=None) -> ValidationReport:
    """Report out-of-bounds detections and per-frame count statistics.

    Empty frames are gaps in the frame index range of the table (a frame
    present with no rows cannot come from a CSV). Standard deviation is the
    population one.
    """
    bounds = bounds if bounds is not None else table.frame_bounds
    oob = []
    if bounds is not None:
        w, h = bounds
        oob = [d for d in table if not (0 <= d.x < w and 0 <= d.y < h)]
    counts = {f: len(v) for f, v in table.frames.items()}
    empty = []
    if counts:
        lo, hi = min(counts), max(counts)
        empty = [f for f in range(lo, hi + 1) if counts.get(f, 0) == 0]
    values = np.array([counts.get(f, 0) for f in range(min(counts), max(counts) + 1)]
                      if counts else [], dtype=float)
    mean = float(values.mean()) if values.size else 0.0
    std = float(values.std()) if values.size else 0.0
    return ValidationReport(oob, empty, counts, mean, std)


# -- PGM ---------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    i = 2
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ImageFormatError("truncated header")
        tokens.append(data[start:i])
    # exactly one whitespace byte separates header from raster
    return tokens, i + 1


def decode_pgm(data: bytes) -> FrameImage:
    magic = data[:2]
    if magic in (b"P2", b"P1", b"P3", b"P4", b"P6"):
        raise ImageFormatError(f"unsupported PGM variant {magic.decode()}")
    if magic != b"P5":
        raise ImageFormatError("wrong magic, not a PGM file")
    tokens, start = _pgm_tokens(data, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError("non-numeric PGM header") from None
    if maxval != 255:
        raise ImageFormatError(f"max value {maxval} != 255")
    payload = data[start:start + width * height]
    if len(payload) < width * height:
        raise ImageFormatError("truncated payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()
    return FrameImage(width, height, arr)


def encode_pgm(image: FrameImage) -> bytes:
    header = f"P5\n{image.width} {image.height}\n255\n".encode()
    return header + np.ascontiguousarray(image.intensities, dtype=np.uint8).tobytes()


def load_frame_image(path) -> FrameImage:
    return decode_pgm(Path(path).read_bytes())


def save_frame_image(image: FrameImage, path) -> None:
    Path(path).write_bytes(encode_pgm(image))


def frame_filename(frame: int) -> str:
    return f"frame_{frame:06d}.pgm"
