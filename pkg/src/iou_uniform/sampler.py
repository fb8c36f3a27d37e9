"""IoU-stratified positive sample generation by controllable jitter.

Each ground-truth box is perturbed as

    cx' = cx + w * u,   cy' = cy + h * v,   w' = w * s,   h' = h * t

with ``u, v ~ U[-max_offset, max_offset]`` and ``s, t ~ U[scale_lo, scale_hi]``,
the bounds chosen per IoU interval. Draws are kept only when they land in the
target interval and the source GT is their best match among all GTs in the
image. Every (GT, interval) pair has a hard attempt budget; exhausting it is
reported, never raised.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .boxgeom import BBox, as_array, iou_matrix

DEFAULT_BOUNDARIES = (0.5, 0.6, 0.7, 0.8, 1.0)
DEFAULT_WEIGHTS = (1.0, 1.5, 3.0, 3.0)


class IoURangeError(ValueError):
    pass


@dataclass(frozen=True)
class IntervalConfig:
    boundaries: tuple[float, ...] = DEFAULT_BOUNDARIES
    samples_per_interval: int = 64
    weights: tuple[float, ...] = DEFAULT_WEIGHTS

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "weights", w)
        if len(b) < 2 or any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ValueError(f"boundaries must be strictly increasing: {b}")
        if b[0] < 0.5 or b[-1] != 1.0:
            raise ValueError("boundaries must start at >= 0.5 and end at 1.0")
        if len(w) != len(b) - 1 or any(x <= 0 for x in w):
            raise ValueError("need one positive weight per interval")
        if self.samples_per_interval < 1:
            raise ValueError("samples_per_interval must be >= 1")

    @property
    def n_intervals(self) -> int:
        return len(self.boundaries) - 1


@dataclass(frozen=True)
class JitterRange:
    max_offset: float
    scale_lo: float
    scale_hi: float

    def __post_init__(self):
        if self.max_offset < 0 or not (0 < self.scale_lo <= 1 <= self.scale_hi):
            raise ValueError(f"invalid jitter range {self}")

    def contains(self, other: "JitterRange") -> bool:
        return (
            other.max_offset <= self.max_offset
            and other.scale_lo >= self.scale_lo
            and other.scale_hi <= self.scale_hi
        )


@dataclass(frozen=True)
class JitterRanges:
    """Per-interval jitter bounds, tightest for the highest-IoU interval."""

    ranges: tuple[JitterRange, ...] = (
        JitterRange(0.35, 0.6, 1.5),
        JitterRange(0.25, 0.7, 1.35),
        JitterRange(0.15, 0.8, 1.2),
        JitterRange(0.08, 0.9, 1.1),
    )

    def __post_init__(self):
        rs = tuple(r if isinstance(r, JitterRange) else JitterRange(*r) for r in self.ranges)
        object.__setattr__(self, "ranges", rs)
        for wide, tight in zip(rs, rs[1:]):
            if not wide.contains(tight):
                raise ValueError("jitter ranges must tighten with increasing interval")

    def __len__(self) -> int:
        return len(self.ranges)

    def __getitem__(self, j: int) -> JitterRange:
        return self.ranges[j]


@dataclass(frozen=True)
class LabeledSample:
    box: BBox
    gt_index: int
    iou: float
    interval: int


@dataclass(eq=False)
class SampleBatch(Sequence):
    """Column-oriented sample store; indexing yields :class:`LabeledSample`.

    ``scene_index`` ties each row to its scene when batches from several
    scenes are concatenated; it is all zeros for single-scene output.
    """

    boxes: np.ndarray
    gt_index: np.ndarray
    iou: np.ndarray
    interval: np.ndarray
    scene_index: np.ndarray = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        n = len(self.boxes)
        self.gt_index = np.asarray(self.gt_index, dtype=np.int64).reshape(n)
        self.iou = np.asarray(self.iou, dtype=float).reshape(n)
        self.interval = np.asarray(self.interval, dtype=np.int64).reshape(n)
        if self.scene_index is None:
            self.scene_index = np.zeros(n, dtype=np.int64)
        self.scene_index = np.asarray(self.scene_index, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.select(np.arange(len(self))[i])
        return LabeledSample(
            BBox(*(float(v) for v in self.boxes[i])),
            int(self.gt_index[i]),
            float(self.iou[i]),
            int(self.interval[i]),
        )

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    def select(self, idx) -> "SampleBatch":
        return SampleBatch(
            self.boxes[idx], self.gt_index[idx], self.iou[idx], self.interval[idx],
            self.scene_index[idx],
        )

    @classmethod
    def empty(cls) -> "SampleBatch":
        return cls(np.zeros((0, 4)), [], [], [], [])

    @classmethod
    def concat(cls, batches: Sequence["SampleBatch"], scene_ids: Sequence[int] | None = None):
        """Concatenate batches; ``scene_ids`` overrides each batch's scene index."""
        if not batches:
            return cls.empty()
        scenes = []
        for k, b in enumerate(batches):
            if scene_ids is None:
                scenes.append(b.scene_index)
            else:
                scenes.append(np.full(len(b), scene_ids[k], dtype=np.int64))
        return cls(
            np.concatenate([b.boxes for b in batches]),
            np.concatenate([b.gt_index for b in batches]),
            np.concatenate([b.iou for b in batches]),
            np.concatenate([b.interval for b in batches]),
            np.concatenate(scenes),
        )


@dataclass(frozen=True)
class Shortfall:
    gt_index: int
    interval: int
    accepted: int
    attempts: int


@dataclass
class SamplingResult:
    samples: SampleBatch
    # accepted[k, j]: samples kept for GT k in interval j
    accepted: np.ndarray
    attempts: np.ndarray
    shortfalls: list[Shortfall] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.shortfalls


def assign_interval(iou: float, cfg: IntervalConfig) -> int:
    """Half-open interval index for ``iou``; 1.0 falls in the last interval."""
    b = cfg.boundaries
    if not (b[0] <= iou <= 1.0):
        raise IoURangeError(f"IoU {iou!r} outside [{b[0]}, 1.0]")
    return min(bisect.bisect_right(b, iou) - 1, cfg.n_intervals - 1)


def assign_intervals(ious: np.ndarray, boundaries: Sequence[float]) -> np.ndarray:
    """Vectorised :func:`assign_interval`; values below ``boundaries[0]`` map to -1."""
    b = np.asarray(boundaries, dtype=float)
    idx = np.searchsorted(b, ious, side="right") - 1
    idx = np.minimum(idx, len(b) - 2)
    idx[np.asarray(ious) < b[0]] = -1
    return idx


def jitter_array(gt: np.ndarray, r: JitterRange, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` jittered copies of the center box ``gt`` (shape ``(4,)``)."""
    off = rng.uniform(-r.max_offset, r.max_offset, size=(n, 2))
    scale = rng.uniform(r.scale_lo, r.scale_hi, size=(n, 2))
    out = np.empty((n, 4))
    out[:, 0] = gt[0] + gt[2] * off[:, 0]
    out[:, 1] = gt[1] + gt[3] * off[:, 1]
    out[:, 2] = gt[2] * scale[:, 0]
    out[:, 3] = gt[3] * scale[:, 1]
    return out


def jitter_once(gt: BBox, ranges: JitterRange, rng: np.random.Generator) -> BBox:
    row = jitter_array(np.asarray(gt.as_tuple()), ranges, 1, rng)[0]
    return BBox(*(float(v) for v in row))


def _clip_boxes(boxes: np.ndarray, clip_to: tuple[float, float]) -> np.ndarray:
    x1 = np.clip(boxes[:, 0] - boxes[:, 2] / 2, 0, clip_to[0])
    y1 = np.clip(boxes[:, 1] - boxes[:, 3] / 2, 0, clip_to[1])
    x2 = np.clip(boxes[:, 0] + boxes[:, 2] / 2, 0, clip_to[0])
    y2 = np.clip(boxes[:, 1] + boxes[:, 3] / 2, 0, clip_to[1])
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=1)


def draw_in_band(
    gts: np.ndarray,
    k: int,
    r: JitterRange,
    lo: float,
    hi: float,
    count: int,
    max_attempts: int,
    rng: np.random.Generator,
    *,
    closed_top: bool = False,
    clip_to: tuple[float, float] | None = None,
    chunk: int | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Rejection-sample up to ``count`` jitters of ``gts[k]`` with IoU in [lo, hi).

    A draw is kept only if GT ``k`` is its argmax-IoU match. Returns the kept
    boxes, their IoUs and the number of attempts consumed.
    """
    chunk = chunk or max(4 * count, 64)
    kept_boxes, kept_iou = [], []
    n_kept = used = 0
    while n_kept < count and used < max_attempts:
        n = min(chunk, max_attempts - used)
        cand = jitter_array(gts[k], r, n, rng)
        if clip_to is not None:
            cand = _clip_boxes(cand, clip_to)
            good = np.all(cand[:, 2:] > 0, axis=1)
        else:
            good = np.ones(n, dtype=bool)
        ious = np.zeros((n, len(gts)))
        if good.any():
            ious[good] = iou_matrix(cand[good], gts)
        own = ious[:, k]
        in_band = (own >= lo) & ((own <= hi) if closed_top else (own < hi))
        ok = good & in_band & (np.argmax(ious, axis=1) == k)
        hits = np.flatnonzero(ok)
        need = count - n_kept
        if len(hits) >= need:
            hits = hits[:need]
            used += int(hits[-1]) + 1
        else:
            used += n
        kept_boxes.append(cand[hits])
        kept_iou.append(own[hits])
        n_kept += len(hits)
    if kept_boxes:
        return np.concatenate(kept_boxes), np.concatenate(kept_iou), used
    return np.zeros((0, 4)), np.zeros(0), used


def generate_uniform_samples(
    gts: Sequence[BBox] | np.ndarray,
    cfg: IntervalConfig = IntervalConfig(),
    ranges: JitterRanges = JitterRanges(),
    rng: np.random.Generator | None = None,
    max_attempts: int | None = None,
    clip_to: tuple[float, float] | None = None,
) -> SamplingResult:
    """Generate ``M`` samples per (GT, interval): ``K * N * M`` when nothing runs short.

    ``max_attempts`` is the per-(GT, interval) budget and defaults to ``40 * M``.
    """
    gts_arr = gts if isinstance(gts, np.ndarray) else as_array(gts)
    K, N, M = len(gts_arr), cfg.n_intervals, cfg.samples_per_interval
    if K < 1:
        raise ValueError("need at least one ground-truth box")
    if len(ranges) != N:
        raise ValueError(f"{len(ranges)} jitter ranges for {N} intervals")
    max_attempts = 40 * M if max_attempts is None else max_attempts
    if max_attempts < M:
        raise ValueError("max_attempts must be >= samples_per_interval")
    rng = rng if rng is not None else np.random.default_rng()

    accepted = np.zeros((K, N), dtype=np.int64)
    attempts = np.zeros((K, N), dtype=np.int64)
    parts_box, parts_iou, parts_gt, parts_int = [], [], [], []
    shortfalls = []
    b = cfg.boundaries
    for k in range(K):
        for j in range(N):
            boxes, ious, used = draw_in_band(
                gts_arr, k, ranges[j], b[j], b[j + 1], M, max_attempts, rng,
                closed_top=(j == N - 1), clip_to=clip_to,
            )
            accepted[k, j], attempts[k, j] = len(boxes), used
            if len(boxes) < M:
                shortfalls.append(Shortfall(k, j, len(boxes), used))
            parts_box.append(boxes)
            parts_iou.append(ious)
            parts_gt.append(np.full(len(boxes), k))
            parts_int.append(np.full(len(boxes), j))
    samples = SampleBatch(
        np.concatenate(parts_box), np.concatenate(parts_gt),
        np.concatenate(parts_iou), np.concatenate(parts_int),
    )
    return SamplingResult(samples, accepted, attempts, shortfalls)
