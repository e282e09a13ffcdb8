"""Appearance model: patches, augmentation, training buffers and the
online identity classifier.

The classifier is multinomial logistic regression on 4x4-pooled patches.
Anything exposing ``add_label``, ``remove_label``, ``train_step`` and
``score`` with the same signatures can replace it.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .detections import FrameImage

PATCH_SIZE = 80
POOL = 4
FEATURE_SIDE = PATCH_SIZE // POOL
FEATURE_DIM = FEATURE_SIDE * FEATURE_SIDE + 1
BACKGROUND = "background"


@dataclass
class Patch:
    pixels: np.ndarray  # (80, 80) uint8
    source_frame: int = -1
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {self.pixels.shape}")


def crop(intensities: np.ndarray, cx: float, cy: float, size: int = PATCH_SIZE) -> np.ndarray:
    """Zero-padded size x size crop whose pixel (size/2, size/2) is the rounded center."""
    h, w = intensities.shape
    x0 = int(np.floor(cx + 0.5)) - size // 2
    y0 = int(np.floor(cy + 0.5)) - size // 2
    out = np.zeros((size, size), np.uint8)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = intensities[sy0:sy1, sx0:sx1]
    return out


def extract_patch(image: FrameImage, center: tuple[float, float], size: int = PATCH_SIZE,
                  frame: int = -1) -> Patch:
    cx, cy = center
    if not (0 <= cx < image.width and 0 <= cy < image.height):
        raise ValueError(f"center {center} outside image {image.width}x{image.height}")
    return Patch(crop(image.intensities, cx, cy, size), frame, (cx, cy))


# -- augmentation ----------------------------------------------------------------

MASKS = ("none", "round", "square")


@dataclass(frozen=True)
class AugmentationOp:
    flip_x: bool = False
    flip_y: bool = False
    mask: str = "none"

    def __post_init__(self):
        if self.mask not in MASKS:
            raise ValueError(f"unknown mask {self.mask!r}")


ALL_OPS: tuple[AugmentationOp, ...] = tuple(
    AugmentationOp(fx, fy, m) for m, fx, fy in itertools.product(MASKS, (False, True), (False, True))
)


def _mask_arrays(size: int = PATCH_SIZE):
    centers = np.arange(size) + 0.5 - size / 2
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    round_mask = (xx * xx + yy * yy) <= 20.0 ** 2
    square_mask = (np.abs(xx) < 20) & (np.abs(yy) < 20)
    return {"round": round_mask, "square": square_mask}


_MASKS = _mask_arrays()


def augment_array(pixels: np.ndarray, op: AugmentationOp) -> np.ndarray:
    out = pixels
    if op.flip_x:
        out = out[:, ::-1]
    if op.flip_y:
        out = out[::-1, :]
    if op.mask != "none":
        out = np.where(_MASKS[op.mask], out, 0).astype(pixels.dtype)
    return np.ascontiguousarray(out)


def augment(patch: Patch, op: AugmentationOp) -> Patch:
    return Patch(augment_array(patch.pixels, op), patch.source_frame, patch.center)


# -- features --------------------------------------------------------------------

def featurize_array(pixels: np.ndarray) -> np.ndarray:
    pooled = pixels.reshape(FEATURE_SIDE, POOL, FEATURE_SIDE, POOL).mean(axis=(1, 3)) / 255.0
    flat = pooled.ravel()
    out = np.empty(FEATURE_DIM)
    out[:-1] = flat - flat.mean()
    out[-1] = 1.0
    return out


def featurize(patch: Patch) -> np.ndarray:
    return featurize_array(patch.pixels)


def featurize_all_ops(pixels: np.ndarray) -> np.ndarray:
    """Features of every augmentation of one patch, shape (12, FEATURE_DIM)."""
    return np.stack([featurize_array(augment_array(pixels, op)) for op in ALL_OPS])


# -- training buffer -------------------------------------------------------------

class TrainBuffer:
    """Per-label rings of exactly ``size`` patches with cached augmented features.

    Features of all labels live in one array of shape
    (capacity, size, 12, FEATURE_DIM) so a batch is gathered with a single
    fancy index.
    """

    def __init__(self, size: int = 250):
        if size < 1:
            raise ValueError("buffer size must be positive")
        self.size = size
        self._patches: dict[Hashable, list[Patch]] = {}
        self._row: dict[Hashable, int] = {}
        self._free: list[int] = []
        self._store = np.zeros((0, size, len(ALL_OPS), FEATURE_DIM), np.float32)

    def __contains__(self, label) -> bool:
        return label in self._row

    def labels(self) -> list:
        return list(self._row)

    def patches(self, label) -> list[Patch]:
        return list(self._patches[label])

    def features(self, label) -> np.ndarray:
        return self._store[self._row[label]]

    def rows(self, labels: Sequence) -> np.ndarray:
        return np.array([self._row[lab] for lab in labels], np.int64)

    @property
    def store(self) -> np.ndarray:
        return self._store

    def _allocate(self) -> int:
        if not self._free:
            old = len(self._store)
            grow = max(4, old)
            self._store = np.concatenate(
                [self._store, np.zeros((grow,) + self._store.shape[1:], np.float32)])
            self._free = list(range(old + grow - 1, old - 1, -1))
        return self._free.pop()

    def fill(self, label, patches: Sequence[Patch]) -> None:
        """Initial fill; entries are repeated cyclically until the ring is full."""
        if label in self._row:
            raise KeyError(f"label {label!r} already present")
        if not patches:
            raise ValueError("cannot fill a buffer with no patches")
        distinct = list(patches)[-self.size:]
        feats = np.stack([featurize_all_ops(p.pixels) for p in distinct])
        idx = [i % len(distinct) for i in range(self.size)]
        row = self._allocate()
        self._store[row] = feats[idx]
        self._row[label] = row
        self._patches[label] = [distinct[i] for i in idx]

    def update(self, label, new_patches: Sequence[Patch]) -> None:
        """Append patches in order and evict the same number of earliest ones."""
        if label not in self._row:
            raise KeyError(f"unknown label {label!r}")
        new = list(new_patches)[-self.size:]
        if not new:
            return
        k = len(new)
        ring = self._store[self._row[label]]
        ring[:self.size - k] = ring[k:].copy()
        ring[self.size - k:] = np.stack([featurize_all_ops(p.pixels) for p in new])
        self._patches[label] = self._patches[label][k:] + new

    def remove(self, label) -> None:
        row = self._row.pop(label)
        del self._patches[label]
        self._store[row] = 0.0
        self._free.append(row)


def buffer_update(buffer: TrainBuffer, label, new_patches: Sequence[Patch]) -> TrainBuffer:
    buffer.update(label, new_patches)
    return buffer


# -- classifier ------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    feature_downsample: int = FEATURE_SIDE
    learning_rate: float = 0.00005
    background_loss_scale: float = 0.1
    loss_gate: float = 0.01
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.loss_gate <= 0:
            raise ValueError("learning_rate and loss_gate must be positive")
        if not 0 < self.background_loss_scale <= 1:
            raise ValueError("background_loss_scale must lie in (0, 1]")
        if self.feature_downsample != FEATURE_SIDE:
            raise ValueError(f"only {FEATURE_SIDE}x{FEATURE_SIDE} pooling is supported")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class ClassifierState:
    weights: np.ndarray = field(default_factory=lambda: np.zeros((0, FEATURE_DIM)))
    adam_m: np.ndarray = field(default_factory=lambda: np.zeros((0, FEATURE_DIM)))
    adam_v: np.ndarray = field(default_factory=lambda: np.zeros((0, FEATURE_DIM)))
    step_count: int = 0
    labels: list = field(default_factory=list)

    @property
    def label_index(self) -> dict:
        return {lab: i for i, lab in enumerate(self.labels)}

    def add_label(self, label) -> "ClassifierState":
        if label in self.labels:
            raise KeyError(f"duplicate label {label!r}")
        zero = np.zeros((1, self.weights.shape[1]))
        self.weights = np.vstack([self.weights, zero])
        self.adam_m = np.vstack([self.adam_m, zero])
        self.adam_v = np.vstack([self.adam_v, zero])
        self.labels.append(label)
        return self

    def remove_label(self, label) -> "ClassifierState":
        if label not in self.labels:
            raise KeyError(f"missing label {label!r}")
        i = self.labels.index(label)
        self.weights = np.delete(self.weights, i, axis=0)
        self.adam_m = np.delete(self.adam_m, i, axis=0)
        self.adam_v = np.delete(self.adam_v, i, axis=0)
        del self.labels[i]
        return self


def add_label(state: ClassifierState, label) -> ClassifierState:
    return state.add_label(label)


def remove_label(state: ClassifierState, label) -> ClassifierState:
    return state.remove_label(label)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(weights: np.ndarray, feats: np.ndarray, targets: np.ndarray,
                  sample_weight: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean weighted softmax cross-entropy and its gradient w.r.t. weights."""
    n = len(targets)
    rows = np.arange(n)
    z = feats @ weights.T
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1)
    nll = np.log(s) - z[rows, targets]
    loss = float(np.dot(sample_weight, nll) / n)
    e *= (sample_weight / (n * s))[:, None]
    e[rows, targets] -= sample_weight / n
    return loss, e.T @ feats


def adam_update(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step in place; ``step`` is the new (1-based) count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    grad = grad * grad
    grad *= 1.0 - beta2
    v += grad
    denom = np.sqrt(v / (1.0 - beta2 ** step))
    denom += eps
    upd = m / denom
    upd *= lr / (1.0 - beta1 ** step)
    param -= upd


def sample_batch(state: ClassifierState, buffer: TrainBuffer, cfg: ClassifierConfig,
                 rng: np.random.Generator):
    n_labels = len(state.labels)
    picks = rng.integers(0, n_labels * buffer.size, size=cfg.batch_size)
    ops = rng.integers(0, len(ALL_OPS), size=cfg.batch_size)
    targets = picks // buffer.size
    slots = picks % buffer.size
    rows = buffer.rows(state.labels)
    feats = buffer.store[rows[targets], slots, ops].astype(np.float64)
    weight = np.ones(cfg.batch_size)
    if BACKGROUND in state.labels:
        weight[targets == state.labels.index(BACKGROUND)] = cfg.background_loss_scale
    return feats, targets, weight


def train_step(state: ClassifierState, buffer: TrainBuffer, cfg: ClassifierConfig,
               rng: np.random.Generator) -> float:
    """One Adam step on a random augmented batch; returns the pre-update loss."""
    if len(state.labels) < 2:
        raise ValueError("training needs at least 2 labels")
    feats, targets, weight = sample_batch(state, buffer, cfg, rng)
    loss, grad = loss_and_grad(state.weights, feats, targets, weight)
    state.step_count += 1
    adam_update(state.weights, grad, state.adam_m, state.adam_v, state.step_count,
                cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    return loss


def score(state: ClassifierState, patch: Patch | np.ndarray) -> np.ndarray:
    """Softmax distribution over ``state.labels``."""
    feats = patch if isinstance(patch, np.ndarray) and patch.ndim == 1 else featurize(patch)
    return softmax(state.weights @ feats)


def score_many(state: ClassifierState, feats: np.ndarray) -> np.ndarray:
    return softmax(feats @ state.weights.T)


# -- checkpoint ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HTCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(state: ClassifierState, path) -> None:
    """Layout: magic, u32 version, u32 header length, JSON header, then the
    weights, adam_m and adam_v as little-endian float64 in row-major order."""
    header = json.dumps({"labels": state.labels, "step_count": state.step_count,
                         "shape": list(state.weights.shape)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for arr in (state.weights, state.adam_m, state.adam_v):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ClassifierState:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a classifier checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    rows, cols = header["shape"]
    size = rows * cols * 8
    off = 12 + hlen
    arrays = []
    for _ in range(3):
        arrays.append(np.frombuffer(data[off:off + size], dtype="<f8").reshape(rows, cols).copy())
        off += size
    return ClassifierState(arrays[0], arrays[1], arrays[2], header["step_count"], header["labels"])
