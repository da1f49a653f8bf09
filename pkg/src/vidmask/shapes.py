"""TemporalShapes: blob videos whose classes differ only in temporal structure.

Every sample shows one Gaussian blob on a dark background. The frame is a
torus: the blob wraps around the edges and its start position is uniform,
so at every frame index the blob position of a moving class is uniform.
Classes:

    0 left, 1 right, 2 up, 3 down      constant-speed drift inside a random window
    4 accelerate                       diagonal drift down-right, speeding up
    5 decelerate                       time reversal of ``accelerate``
    6 appear_then_vanish               static blob fading in then out
    7 vanish_then_appear               static blob fading out then back in

``right``, ``down`` and ``decelerate`` are generated as time reversals of
``left``, ``up`` and ``accelerate``. Together with the uniform positions this
makes each frame of a moving class carry no information about its direction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

CLASS_NAMES = (
    "left",
    "right",
    "up",
    "down",
    "accelerate",
    "decelerate",
    "appear_then_vanish",
    "vanish_then_appear",
)
REVERSAL_PAIRS = ((0, 1), (2, 3), (4, 5))


@dataclass(frozen=True)
class TemporalShapesSpec:
    num_frames: int = 16
    size: int = 16
    num_classes: int = 8
    blob_std: tuple[float, float] = (1.0, 1.5)
    travel: float = 7.0  # pixels covered by the directional classes
    diag_travel: float = 6.0
    window_start: tuple[int, int] = (0, 5)  # motion/fade window start frame, inclusive
    window_end: tuple[int, int] = (10, 15)
    noise_std: float = 0.05

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must lie in [1, {len(CLASS_NAMES)}]")
        if self.window_end[1] > self.num_frames - 1:
            raise ValueError("motion window exceeds the clip")
        if max(self.travel, self.diag_travel) > self.size / 2:
            raise ValueError("travel must not exceed half the frame, or the wrap-around hides the direction")

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES[: self.num_classes]

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class VideoDataset:
    """In-memory split. ``videos`` is float32 ``[N, T, H, W, 1]`` on the 8-bit grid in [-1, 1]."""

    videos: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    class_names: tuple[str, ...]
    spec_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "VideoDataset":
        idx = np.asarray(idx)
        return VideoDataset(self.videos[idx], self.labels[idx], self.ids[idx], self.class_names, self.spec_hash, dict(self.meta))


def quantize(video: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to uint8."""
    return np.round((np.clip(video, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return (q.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def split_of(sample_id: int) -> str:
    """80/10/10 train/val/test assignment from a stable hash of the id."""
    h = int.from_bytes(hashlib.blake2b(str(int(sample_id)).encode(), digest_size=8).digest(), "little") % 10
    return "train" if h < 8 else ("val" if h == 8 else "test")


def _window(spec, rng):
    return int(rng.integers(spec.window_start[0], spec.window_start[1] + 1)), int(
        rng.integers(spec.window_end[0], spec.window_end[1] + 1)
    )


def _progress(spec, t0, t1, profile="linear"):
    t = np.arange(spec.num_frames, dtype=np.float64)
    u = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
    return u**2 if profile == "quadratic" else u


def _trajectory(label, spec, rng):
    """Blob centre ``(rows, cols)`` and intensity per frame for a base (unreversed) class."""
    T, S = spec.num_frames, spec.size
    t0, t1 = _window(spec, rng)
    r0, c0 = rng.uniform(0, S, size=2)
    amp = np.ones(T)
    if label in (0, 2):  # leftwards / upwards drift
        along = (c0 if label == 0 else r0) - spec.travel * _progress(spec, t0, t1)
        rows, cols = (np.full(T, r0), along) if label == 0 else (along, np.full(T, c0))
    elif label == 4:
        u = _progress(spec, t0, t1, "quadratic")
        rows, cols = r0 + spec.diag_travel * u, c0 + spec.diag_travel * u
    else:
        rows, cols = np.full(T, r0), np.full(T, c0)
        t = np.arange(T, dtype=np.float64)
        bump = np.sin(np.pi * np.clip((t - t0) / (t1 - t0), 0.0, 1.0))
        amp = bump if label == 6 else 1.0 - bump
    return rows % S, cols % S, amp


def _wrap(d, size):
    return (d + size / 2) % size - size / 2


def render_sample(label: int, spec: TemporalShapesSpec, rng: np.random.Generator) -> np.ndarray:
    """One float video ``[T, H, W, 1]`` in [-1, 1] (before quantization)."""
    base = {1: 0, 3: 2, 5: 4}.get(label, label)
    rows, cols, amp = _trajectory(base, spec, rng)
    std = rng.uniform(*spec.blob_std)
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)
    dy = _wrap(yy[None] - rows[:, None, None], spec.size)
    dx = _wrap(xx[None] - cols[:, None, None], spec.size)
    frames = -1.0 + 2.0 * amp[:, None, None] * np.exp(-(dy**2 + dx**2) / (2 * std**2))
    frames = frames + spec.noise_std * rng.standard_normal(frames.shape)
    if base != label:
        frames = frames[::-1]
    return np.clip(frames, -1.0, 1.0)[..., None].astype(np.float32)


def generate_temporal_shapes(spec: TemporalShapesSpec, n: int, seed: int = 0, start_id: int = 0) -> VideoDataset:
    """``n`` samples with ids ``start_id..start_id+n-1``; label is ``id mod num_classes``.

    Each sample is drawn from its own generator seeded by ``(seed, id)``, so
    shards over disjoint id ranges concatenate to the same dataset.
    """
    ids = np.arange(start_id, start_id + n, dtype=np.int64)
    labels = (ids % spec.num_classes).astype(np.int64)
    videos = np.empty((n, spec.num_frames, spec.size, spec.size, 1), dtype=np.float32)
    for k, (i, y) in enumerate(zip(ids, labels)):
        videos[k] = render_sample(int(y), spec, np.random.default_rng([seed, int(i)]))
    videos = dequantize(quantize(videos))
    return VideoDataset(videos, labels, ids, spec.class_names, spec.hash(), {"seed": seed, "spec": spec.to_dict()})


def split_dataset(ds: VideoDataset) -> dict[str, VideoDataset]:
    names = np.array([split_of(i) for i in ds.ids])
    return {s: ds.subset(np.flatnonzero(names == s)) for s in ("train", "val", "test")}
