"""Axis-aligned box geometry.

Boxes are center-based ``(cx, cy, w, h)`` everywhere in the package; the
corner form ``(x1, y1, x2, y2)`` is only used for conversion and area math.
Scalar helpers operate on :class:`BBox` values, the ``*_array`` helpers on
``(n, 4)`` float arrays in the same center layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# |dw|, |dh| bound before exponentiation (conventional detector guard).
DELTA_CLAMP = math.log(1000.0 / 16.0)


class InvalidBoxError(ValueError):
    """Raised for boxes with non-positive or non-finite width/height."""


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0) or not all(
            math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)
        ):
            raise InvalidBoxError(f"invalid box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def to_corners(self) -> tuple[float, float, float, float]:
        hw, hh = 0.5 * self.w, 0.5 * self.h
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        return self.w * self.h


class Deltas(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    if a == b:
        return 1.0
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def encode_deltas(proposal: BBox, gt: BBox) -> Deltas:
    return Deltas(
        (gt.cx - proposal.cx) / proposal.w,
        (gt.cy - proposal.cy) / proposal.h,
        math.log(gt.w / proposal.w),
        math.log(gt.h / proposal.h),
    )


_clamp_hits = 0


def clamp_count() -> int:
    """Number of dw/dh components clamped by ``apply_deltas*`` so far."""
    return _clamp_hits


def reset_clamp_count() -> None:
    global _clamp_hits
    _clamp_hits = 0


def apply_deltas(box: BBox, d: Deltas | tuple) -> BBox:
    out = apply_deltas_array(np.asarray([box.as_tuple()]), np.asarray([tuple(d)], dtype=float))
    return BBox(*(float(v) for v in out[0]))


# ---------------------------------------------------------------------------
# array forms


def as_array(boxes) -> np.ndarray:
    """Stack boxes (BBox values or 4-sequences) into an ``(n, 4)`` array."""
    rows = [b.as_tuple() if isinstance(b, BBox) else tuple(b) for b in boxes]
    return np.asarray(rows, dtype=float).reshape(-1, 4)


def to_corners_array(boxes: np.ndarray) -> np.ndarray:
    half = 0.5 * boxes[:, 2:]
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def from_corners_array(corners: np.ndarray) -> np.ndarray:
    wh = corners[:, 2:] - corners[:, :2]
    return np.concatenate([corners[:, :2] + 0.5 * wh, wh], axis=1)


def validate_array(boxes: np.ndarray) -> None:
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise InvalidBoxError(f"expected (n, 4) boxes, got shape {boxes.shape}")
    if not np.all(np.isfinite(boxes)) or np.any(boxes[:, 2:] <= 0):
        raise InvalidBoxError("boxes must be finite with positive width and height")


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` center boxes -> ``(n, m)``."""
    ca, cb = to_corners_array(a), to_corners_array(b)
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    out = inter / union
    same = np.all(a[:, None, :] == b[None, :, :], axis=2)
    out[same] = 1.0
    return out


def iou_aligned(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally long box arrays."""
    ca, cb = to_corners_array(a), to_corners_array(b)
    iw = np.minimum(ca[:, 2], cb[:, 2]) - np.maximum(ca[:, 0], cb[:, 0])
    ih = np.minimum(ca[:, 3], cb[:, 3]) - np.maximum(ca[:, 1], cb[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    out = inter / union
    out[np.all(a == b, axis=1)] = 1.0
    return out


def encode_deltas_array(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            (gts[:, 0] - proposals[:, 0]) / proposals[:, 2],
            (gts[:, 1] - proposals[:, 1]) / proposals[:, 3],
            np.log(gts[:, 2] / proposals[:, 2]),
            np.log(gts[:, 3] / proposals[:, 3]),
        ],
        axis=1,
    )


def apply_deltas_array(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    global _clamp_hits
    dwh = deltas[:, 2:]
    clamped = np.clip(dwh, -DELTA_CLAMP, DELTA_CLAMP)
    _clamp_hits += int(np.count_nonzero(clamped != dwh))
    return np.stack(
        [
            boxes[:, 0] + deltas[:, 0] * boxes[:, 2],
            boxes[:, 1] + deltas[:, 1] * boxes[:, 3],
            boxes[:, 2] * np.exp(clamped[:, 0]),
            boxes[:, 3] * np.exp(clamped[:, 1]),
        ],
        axis=1,
    )
